#!/usr/bin/env python
"""Run every calibrated scenario and print its headline numbers.

Usage:
    python scripts/run_all_scenarios.py [--only NAME] [--time-scale-mult F]

Each scenario runs the real socket pipeline, so expect a few seconds per
scenario at the default time scales. --time-scale-mult stretches or
shrinks every scenario's simulated-to-wall ratio, e.g. 0.5 halves run
time at the cost of noisier timings.
"""

import argparse
import sys
import time

from pipelink.report import format_run_summary
from pipelink.scenarios import (
    run_hetero_3dev,
    run_lb_midslow,
    run_res_vs_piggy,
    run_threads_sweep,
)

DEFAULT_SCALES = {
    "hetero-3dev": 0.2,
    "lb-midslow": 0.1,
    "resvspiggy-3dev": 1.0,
    "threads-sweep": 0.05,
}


def show_hetero(mult: float) -> None:
    out = run_hetero_3dev(time_scale=DEFAULT_SCALES["hetero-3dev"] * mult)
    print(format_run_summary(out["baseline_report"], "even split"))
    print(format_run_summary(out["optimized_report"], "optimized"))
    print(
        f"planned objective ratio {out['objective_ratio']:.3f}, "
        f"measured latency ratio {out['latency_ratio']:.3f}, "
        f"digests {'ok' if out['digests_ok'] else 'MISMATCH'}"
    )


def show_lb(mult: float) -> None:
    out = run_lb_midslow(time_scale=DEFAULT_SCALES["lb-midslow"] * mult)
    print(format_run_summary(out["report"], "balancer on"))
    print(format_run_summary(out["report_off"], "balancer off"))
    imp = out["improvement"]
    if imp is None:
        print("no rebalance was applied")
    else:
        print(
            f"within run: {imp['mean_before_sim'] * 1000:.1f} ms before the move, "
            f"{imp['mean_after_sim'] * 1000:.1f} ms after "
            f"({imp['improvement'] * 100:.1f}% better)"
        )
        vs = out["improvement_vs_off"]
        print(
            f"vs balancer off: {vs['mean_on_sim'] * 1000:.1f} ms on, "
            f"{vs['mean_off_sim'] * 1000:.1f} ms off "
            f"({vs['improvement'] * 100:.1f}% better), "
            f"digests {'ok' if out['digests_ok'] else 'MISMATCH'}"
        )


def show_res(mult: float) -> None:
    out = run_res_vs_piggy(time_scale=DEFAULT_SCALES["resvspiggy-3dev"] * mult)
    print(format_run_summary(out["direct_report"], "direct skip links"))
    print(format_run_summary(out["piggyback_report"], "piggybacked skips"))
    print(
        f"direct wins {out['direct_wins_fraction'] * 100:.0f}% of tokens, "
        f"skip payload beats the relay on {out['hop_order_fraction'] * 100:.0f}% "
        f"of arrivals, digests equal: {out['digests_equal']}, "
        f"reference check {'ok' if out['digests_ok'] else 'MISMATCH'}"
    )


def show_threads(mult: float) -> None:
    out = run_threads_sweep(time_scale=DEFAULT_SCALES["threads-sweep"] * mult)
    base = None
    for k, x in sorted(out["throughput"].items()):
        base = base if base is not None else x
        print(f"  {k} in-flight: {x:7.3f} tokens/s  (x{x / base:.2f} vs 1)")
    print(f"digests {'ok' if out['digests_ok'] else 'MISMATCH'}")


RUNNERS = {
    "hetero-3dev": show_hetero,
    "lb-midslow": show_lb,
    "resvspiggy-3dev": show_res,
    "threads-sweep": show_threads,
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--only", choices=tuple(RUNNERS))
    parser.add_argument("--time-scale-mult", type=float, default=1.0)
    args = parser.parse_args()
    names = [args.only] if args.only else list(RUNNERS)
    for name in names:
        print(f"=== {name} ===")
        t0 = time.perf_counter()
        RUNNERS[name](args.time_scale_mult)
        print(f"({time.perf_counter() - t0:.1f}s wall)\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
