"""Summaries, comparisons, and persistence for run reports."""

from __future__ import annotations

import json
from typing import Dict, Optional, Tuple

from .runtime.pipeline import RunReport


def save_report(report: RunReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def load_report(path: str) -> RunReport:
    with open(path) as fh:
        return RunReport.from_dict(json.load(fh))


def format_run_summary(report: RunReport, label: str = "run") -> str:
    lines = [
        f"{label}: mode={report.residual_mode} threads={report.num_threads} "
        f"ring={report.device_order} time_scale={report.time_scale}",
        f"  tokens={report.total_tokens} wall={report.wall_seconds:.3f}s "
        f"simulated={report.sim_seconds:.3f}s",
        f"  throughput={report.throughput_tokens_per_sim_sec:.3f} tokens/s "
        f"mean_latency={report.mean_latency_sim() * 1000:.1f}ms (simulated)",
    ]
    busy = " ".join(
        f"dev{d}={report.device_busy_sim[d]:.3f}s" for d in report.device_order
    )
    lines.append(f"  busy: {busy}")
    reloads = {
        d: v for d, v in report.device_reload_sim.items() if v > 0
    }
    if reloads:
        lines.append(
            "  reload: "
            + " ".join(f"dev{d}={v:.3f}s" for d, v in sorted(reloads.items()))
        )
    for e in report.rebalances:
        status = "applied" if e.applied else "skipped"
        lines.append(
            f"  rebalance[{status}] at {e.wall_time:.3f}s "
            f"({e.trigger_kind} on dev{e.trigger_device}): {e.reason}"
        )
        if e.applied:
            moves = ", ".join(f"m{m}:{a}->{b}" for m, a, b in e.moved)
            lines.append(
                f"    switch_sample={e.switch_sample} moves=[{moves}] "
                f"est_release={e.est_release_sec * 1000:.1f}ms "
                f"est_reload={e.est_reload_sec * 1000:.1f}ms"
            )
    return "\n".join(lines)


def compare_runs(label_a: str, a: RunReport, label_b: str, b: RunReport) -> str:
    """Side-by-side latency and throughput, plus the b-over-a ratio."""
    mean_a = a.mean_latency_sim()
    mean_b = b.mean_latency_sim()
    lines = [
        f"{'':<14}{label_a:>16}{label_b:>16}",
        f"{'tokens':<14}{a.total_tokens:>16}{b.total_tokens:>16}",
        f"{'mean lat ms':<14}{mean_a * 1000:>16.2f}{mean_b * 1000:>16.2f}",
        f"{'tokens/s':<14}{a.throughput_tokens_per_sim_sec:>16.3f}"
        f"{b.throughput_tokens_per_sim_sec:>16.3f}",
    ]
    if mean_a > 0:
        lines.append(f"latency ratio {label_b}/{label_a}: {mean_b / mean_a:.3f}x")
    return "\n".join(lines)


def post_trigger_improvement(report: RunReport) -> Optional[Dict[str, float]]:
    """Mean latency before vs after the first applied rebalance switch.

    Tokens of samples that started before the switch sample count as the
    "before" population even if they finished after it; the "after"
    population pays the weight reload, so the comparison includes the
    transition cost.
    """
    applied = [e for e in report.rebalances if e.applied]
    if not applied:
        return None
    switch = applied[0].switch_sample
    before = report.latencies_sim(sample_max=switch - 1)
    after = report.latencies_sim(sample_min=switch)
    if not before or not after:
        return None
    mean_before = sum(before) / len(before)
    mean_after = sum(after) / len(after)
    return {
        "switch_sample": switch,
        "mean_before_sim": mean_before,
        "mean_after_sim": mean_after,
        "improvement": (mean_before - mean_after) / mean_before,
        "tokens_before": len(before),
        "tokens_after": len(after),
    }


def ordering_fraction(fast: RunReport, slow: RunReport) -> float:
    """Fraction of shared tokens where `fast` beat `slow` on latency."""
    lat_fast = {(r.sample, r.token): r.wall_latency / (fast.time_scale or 1.0) for r in fast.tokens}
    lat_slow = {(r.sample, r.token): r.wall_latency / (slow.time_scale or 1.0) for r in slow.tokens}
    keys = sorted(set(lat_fast) & set(lat_slow))
    if not keys:
        raise ValueError("reports share no tokens")
    wins = sum(1 for k in keys if lat_fast[k] < lat_slow[k])
    return wins / len(keys)


def residual_hop_ordering(direct: RunReport, piggyback: RunReport) -> float:
    """Fraction of cross-device residuals the direct run landed earlier.

    Both runs must cover the same workload; each residual is compared by
    its arrival offset from its own token's dispatch, which cancels the
    runs' differing absolute timelines.
    """
    a = direct.residual_arrival_offsets()
    b = piggyback.residual_arrival_offsets()
    keys = sorted(set(a) & set(b))
    if not keys:
        raise ValueError("reports share no cross-device residuals")
    wins = sum(1 for k in keys if a[k] < b[k])
    return wins / len(keys)


def digests_match(a: RunReport, b: RunReport) -> bool:
    return (
        a.run_digest == b.run_digest
        and a.sample_digests == b.sample_digests
        and a.logits == b.logits
    )
