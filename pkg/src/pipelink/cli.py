"""Command line front end: profile, plan, simulate, compare, report.

A typical session generates a graph and a fleet file, solves a placement,
runs the socket pipeline on it, and renders the results:

    pipelink profile --gen-blocks 6 --hidden 2048 --out work
    pipelink profile --speeds 3e9,3e9,1e9 --mem-avail-mb 762,762,850 \
        --mem-total-mb 1000,1000,1100 --out work
    pipelink plan --graph work/graph.txt --fleet work/fleet.txt --out work
    pipelink simulate --graph work/graph.txt --fleet work/fleet.txt \
        --samples 3 --tokens 5 --time-scale 0.2 --out work
    pipelink compare --scenario hetero-3dev --out work/hetero
    pipelink report --out work/hetero
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .assign import InfeasibleError, save_plan, solve_assignment
from .balance import solve_overlap
from .experiments import (
    COMPARE_CSV,
    OVERLAP_TXT,
    PLAN_TXT,
    RAW_CSV,
    RESIDUAL_MODES,
    SUMMARY_JSON,
    ExperimentSpec,
    GraphSource,
    Variant,
    get_scenario,
    long_rows,
    read_raw_rows,
    recompute_from_raw,
    render_overlap_text,
    render_plan_text,
    run_experiment,
    write_compare_long,
)
from .fleet import (
    DeviceProfile,
    FleetProfile,
    MonitorError,
    ProbeServer,
    load_fleet,
    measure_link,
    save_fleet,
)
from .graph import (
    GraphError,
    find_candidates,
    partition,
    profile_submodules,
    save_graph,
)
from .report import format_run_summary
from .runtime.pipeline import BalancerConfig
from .runtime.routing import transmission_maps_for_plan
from .scenarios import prepare_instance

_MODULE_ERRORS = (
    GraphError,
    MonitorError,
    InfeasibleError,
    ValueError,
    KeyError,
    OSError,
)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _float_list(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part]


def _graph_source(args: argparse.Namespace) -> Optional[GraphSource]:
    has_file = getattr(args, "graph", None) is not None
    has_gen = getattr(args, "gen_blocks", None) is not None
    if has_file and has_gen:
        raise ValueError("give either --graph or --gen-blocks, not both")
    if has_file:
        return GraphSource(path=args.graph)
    if has_gen:
        return GraphSource(
            gen_blocks=args.gen_blocks,
            hidden=args.hidden,
            gen_seed=args.gen_seed,
            cross_skips=not args.no_cross_skips,
        )
    return None


def _require_graph(args: argparse.Namespace) -> GraphSource:
    source = _graph_source(args)
    if source is None:
        raise ValueError("a graph is required: pass --graph PATH or --gen-blocks N")
    return source


def _require_fleet(args: argparse.Namespace) -> str:
    if not args.fleet:
        raise ValueError("a fleet is required: pass --fleet PATH")
    return args.fleet


def _out_dir(args: argparse.Namespace) -> Optional[Path]:
    if getattr(args, "out", None) is None:
        return None
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- profile --------------------------------------------------------------------

def _synth_fleet(args: argparse.Namespace) -> FleetProfile:
    speeds = _float_list(args.speeds)
    avail = _float_list(args.mem_avail_mb)
    total = _float_list(args.mem_total_mb)
    if not (len(speeds) == len(avail) == len(total)):
        raise ValueError(
            "speeds, mem-avail-mb, and mem-total-mb need one entry per device"
        )
    m = len(speeds)
    devices = [
        DeviceProfile(
            device_id=i,
            flops_per_sec=speeds[i],
            mem_total_bytes=int(total[i] * 1e6),
            mem_avail_bytes=int(avail[i] * 1e6),
        )
        for i in range(m)
    ]
    bandwidth = [
        [0.0 if i == j else args.bandwidth for j in range(m)] for i in range(m)
    ]
    latency = [
        [0.0 if i == j else args.latency for j in range(m)] for i in range(m)
    ]
    fleet = FleetProfile(devices=devices, bandwidth=bandwidth, latency=latency)
    fleet.validate()
    return fleet


def _print_fleet(fleet: FleetProfile) -> None:
    print(f"fleet: {len(fleet.devices)} devices")
    for d in fleet.devices:
        print(
            f"  device {d.device_id}: {d.flops_per_sec / 1e9:.2f} Gflop/s, "
            f"{d.mem_avail_bytes / 1e6:.0f}/{d.mem_total_bytes / 1e6:.0f} MB free"
        )
    m = len(fleet.devices)
    for i in range(m):
        for j in range(m):
            if i != j:
                print(
                    f"  link {i}->{j}: {fleet.bandwidth[i][j] / 1e6:.1f} MB/s, "
                    f"{fleet.latency[i][j] * 1000:.2f} ms"
                )


def _cmd_profile(args: argparse.Namespace) -> int:
    source = _graph_source(args)
    fleet: Optional[FleetProfile] = None
    if args.fleet:
        fleet = load_fleet(args.fleet)
    elif args.speeds:
        if not (args.mem_avail_mb and args.mem_total_mb):
            raise ValueError(
                "--speeds needs --mem-avail-mb and --mem-total-mb alongside"
            )
        fleet = _synth_fleet(args)
    if source is None and fleet is None and not args.probe_loopback:
        raise ValueError(
            "nothing to profile: pass a graph source, --fleet, --speeds, "
            "or --probe-loopback"
        )
    out = _out_dir(args)
    if source is not None:
        graph = source.resolve()
        plan = partition(graph, find_candidates(graph))
        profiles = profile_submodules(graph, plan)
        print(
            f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges, "
            f"{len(profiles)} sub-modules"
        )
        for p in profiles:
            skips = {k: v for k, v in p.out_to.items() if k != p.index + 1}
            note = f" skips={skips}" if skips else ""
            print(
                f"  module {p.index}: {p.flops / 1e6:.1f}M flop, "
                f"{p.mem_bytes / 1e6:.1f} MB, out={p.out_to}{note}"
            )
        if out is not None:
            save_graph(graph, str(out / "graph.txt"))
            print(f"wrote {out / 'graph.txt'}")
    if fleet is not None:
        _print_fleet(fleet)
        if out is not None:
            save_fleet(fleet, str(out / "fleet.txt"))
            print(f"wrote {out / 'fleet.txt'}")
    if args.probe_loopback:
        server = ProbeServer()
        try:
            bps, samples = measure_link(
                server.endpoint(0), server.endpoint(1), chunk_bytes=args.probe_bytes
            )
        finally:
            server.close()
        print(
            f"loopback probe: {bps / 1e6:.1f} MB/s median over "
            f"{len(samples)} rounds of {args.probe_bytes} bytes"
        )
    return 0


# --- plan -----------------------------------------------------------------------

def _cmd_plan(args: argparse.Namespace) -> int:
    source = _require_graph(args)
    fleet = load_fleet(_require_fleet(args))
    graph = source.resolve()
    inst = prepare_instance(graph, fleet, beta=args.beta)
    plan = solve_assignment(inst.cost_model)
    print(
        f"objective {plan.objective * 1000:.3f} ms "
        f"(compute {plan.t_compute * 1000:.3f} ms, "
        f"data {plan.t_data * 1000:.3f} ms)"
    )
    spans = plan.ranges()
    for dev in plan.device_order:
        lo, hi = spans[dev]
        print(f"  device {dev}: modules {lo}..{hi}")
    out = _out_dir(args)
    if out is not None:
        plans = {"optimized": plan}
        (out / PLAN_TXT).write_text(render_plan_text(plans, inst.cost_model))
        alloc = solve_overlap(plan, inst.cost_model)
        maps = {
            "optimized": {
                mode: transmission_maps_for_plan(
                    plan, inst.profiles, fleet, mode,
                    return_bytes=inst.return_bytes,
                )
                for mode in sorted(set(RESIDUAL_MODES.values()))
            }
        }
        (out / OVERLAP_TXT).write_text(
            render_overlap_text({"optimized": alloc}, maps)
        )
        save_plan(plan, str(out / "assignment.plan"))
        print(f"wrote {out / PLAN_TXT}, {out / OVERLAP_TXT}, "
              f"{out / 'assignment.plan'}")
    return 0


# --- simulate and compare ---------------------------------------------------------

def _balancer_from_flags(args: argparse.Namespace) -> BalancerConfig:
    return BalancerConfig(
        theta=args.theta,
        window_tokens=args.window,
        enable_after_samples=args.enable_after,
        max_rebalances=args.max_rebalances,
    )


def _run_and_render(
    spec: ExperimentSpec, args: argparse.Namespace
) -> int:
    out = _out_dir(args)
    result = run_experiment(
        spec, base_port=args.base_port, out_dir=out
    )
    base_tps: Optional[float] = None
    for variant in spec.variants:
        report = result.reports[variant.label]
        print(format_run_summary(report, label=variant.label))
        tps = report.throughput_tokens_per_sim_sec
        if base_tps is None:
            base_tps = tps
        else:
            print(f"  speedup vs {result.base_label}: x{tps / base_tps:.3f}")
    bad = [label for label, ok in result.digests_ok.items() if not ok]
    if bad:
        print(
            f"digest check vs sequential reference: MISMATCH in {', '.join(bad)}"
        )
        return 1
    print("digest check vs sequential reference: ok")
    if out is not None:
        print(f"wrote {out / RAW_CSV}, {out / SUMMARY_JSON}, {out / COMPARE_CSV}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    spec = ExperimentSpec(
        name="simulate",
        graph=_require_graph(args),
        fleet=_require_fleet(args),
        variants=(
            Variant(
                plan=args.assign,
                threads=args.threads,
                mode=args.mode,
                balance=args.balance == "on",
            ),
        ),
        samples=args.samples,
        tokens_per_sample=args.tokens,
        ctx_len=args.ctx,
        seed=args.seed,
        time_scale=args.time_scale,
        beta=args.beta,
        balancer=_balancer_from_flags(args),
    )
    return _run_and_render(spec, args)


def _cmd_compare(args: argparse.Namespace) -> int:
    if args.scenario:
        spec = get_scenario(args.scenario)
        if args.time_scale is not None:
            spec.time_scale = args.time_scale
        if args.samples is not None:
            spec.samples = args.samples
        if args.tokens is not None:
            spec.tokens_per_sample = args.tokens
        if args.seed is not None:
            spec.seed = args.seed
    else:
        balance = args.balance == "on"
        spec = ExperimentSpec(
            name="compare",
            graph=_require_graph(args),
            fleet=_require_fleet(args),
            variants=(
                Variant(
                    plan="baseline", threads=args.threads,
                    mode=args.mode, balance=balance,
                ),
                Variant(
                    plan="optimized", threads=args.threads,
                    mode=args.mode, balance=balance,
                ),
            ),
            samples=args.samples if args.samples is not None else 10,
            tokens_per_sample=args.tokens if args.tokens is not None else 10,
            ctx_len=args.ctx,
            seed=args.seed if args.seed is not None else 0,
            time_scale=args.time_scale if args.time_scale is not None else 0.1,
            beta=args.beta,
            balancer=_balancer_from_flags(args),
        )
    return _run_and_render(spec, args)


# --- report ---------------------------------------------------------------------

def _cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else None
    if out is None:
        raise ValueError("report needs --out DIR pointing at a finished run")
    raw_path = out / RAW_CSV
    if not raw_path.exists():
        raise ValueError(f"no {RAW_CSV} under {out}")
    rows = read_raw_rows(raw_path)
    if not rows:
        raise ValueError(f"{raw_path} holds no rows")
    recomputed = recompute_from_raw(rows)
    order = list(dict.fromkeys(row["variant"] for row in rows))
    base_label = order[0]

    summary_path = out / SUMMARY_JSON
    consistent = True
    if summary_path.exists():
        import json

        summary = json.loads(summary_path.read_text())
        base_label = summary.get("base_variant", base_label)
        for label, entry in summary.get("variants", {}).items():
            got = recomputed.get(label)
            if got is None:
                consistent = False
                continue
            drift = abs(entry["tokens_per_sec"] - got["tokens_per_sec"])
            if drift > 1e-6 * max(entry["tokens_per_sec"], 1e-12):
                consistent = False

    base_tps = recomputed[base_label]["tokens_per_sec"]
    header = (
        f"{'variant':<34} {'tokens/s':>9} {'speedup':>8} "
        f"{'mean ms':>9} {'p50 ms':>9} {'p90 ms':>9}"
    )
    print(header)
    print("-" * len(header))
    for label in order:
        entry = recomputed[label]
        lat = entry["latency_sim"]
        print(
            f"{label:<34} {entry['tokens_per_sec']:>9.3f} "
            f"{entry['tokens_per_sec'] / base_tps:>8.3f} "
            f"{lat['mean'] * 1000:>9.1f} {lat['p50'] * 1000:>9.1f} "
            f"{lat['p90'] * 1000:>9.1f}"
        )
    for label in order:
        busy = recomputed[label]["busy_fraction"]
        cells = " ".join(f"dev{d}={v * 100:.0f}%" for d, v in sorted(busy.items()))
        print(f"busy {label}: {cells}")

    long = [
        (label, metric, value)
        for label in order
        for metric, value in _long_metrics(recomputed[label], base_tps)
    ]
    write_compare_long(out / COMPARE_CSV, long)
    print(f"wrote {out / COMPARE_CSV}")
    if not consistent:
        return _fail("summary.json disagrees with run_raw.csv; trust the raw rows")
    return 0


def _long_metrics(entry: dict, base_tps: float) -> List[tuple]:
    rows = [
        ("tokens_per_sec", entry["tokens_per_sec"]),
        ("speedup", entry["tokens_per_sec"] / base_tps),
    ]
    rows += [
        (f"latency_{stat}_sim", value)
        for stat, value in entry["latency_sim"].items()
    ]
    rows += [
        (f"busy_fraction_{dev}", value)
        for dev, value in sorted(entry["busy_fraction"].items())
    ]
    rows += [
        (f"{col}_mean_sim", cell["mean_sim_sec_per_token"])
        for col, cell in sorted(entry["hop_table"].items())
    ]
    return rows


# --- parser ---------------------------------------------------------------------

def _add_graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help="graph file to load")
    p.add_argument(
        "--gen-blocks", type=int,
        help="generate a synthetic decoder graph with this many blocks",
    )
    p.add_argument("--hidden", type=int, default=1024,
                   help="hidden width for --gen-blocks")
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument(
        "--no-cross-skips", action="store_true",
        help="omit long skip connections when generating",
    )


def _add_variant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=1,
                   help="in-flight samples driven through the ring")
    p.add_argument(
        "--mode", choices=tuple(RESIDUAL_MODES), default="residual",
        help="skip-value transport: direct connections or inside activations",
    )
    p.add_argument("--balance", choices=("on", "off"), default="off",
                   help="runtime load balancer")
    p.add_argument("--theta", type=float, default=1.5,
                   help="balancer trigger: busy vs median ratio")
    p.add_argument("--window", type=int, default=10,
                   help="balancer observation window, tokens per device")
    p.add_argument("--enable-after", type=int, default=2,
                   help="samples to finish before the balancer may act")
    p.add_argument("--max-rebalances", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipelink",
        description=(
            "plan and simulate pipelined model inference over a device fleet"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prof = sub.add_parser(
        "profile", help="inspect or generate graph and fleet profiles"
    )
    _add_graph_flags(prof)
    prof.add_argument("--fleet", help="fleet file to load and validate")
    prof.add_argument("--speeds", help="synthesize a fleet: comma list of flops/sec")
    prof.add_argument("--mem-avail-mb", help="comma list of MB, one per device")
    prof.add_argument("--mem-total-mb", help="comma list of MB, one per device")
    prof.add_argument("--bandwidth", type=float, default=50e6,
                      help="bytes/sec per synthesized link")
    prof.add_argument("--latency", type=float, default=0.001,
                      help="seconds per synthesized link")
    prof.add_argument("--probe-loopback", action="store_true",
                      help="measure raw loopback bandwidth and print it")
    prof.add_argument("--probe-bytes", type=int, default=4 << 20)
    prof.add_argument("--out", help="directory for graph.txt / fleet.txt")
    prof.set_defaults(func=_cmd_profile)

    plan = sub.add_parser("plan", help="assign sub-modules to devices")
    _add_graph_flags(plan)
    plan.add_argument("--fleet", required=True)
    plan.add_argument("--beta", type=float, default=0.8,
                      help="usable fraction of each device's free memory")
    plan.add_argument("--out", help="directory for plan.txt and overlap.txt")
    plan.set_defaults(func=_cmd_plan)

    sim = sub.add_parser("simulate", help="run one pipeline variant on sockets")
    _add_graph_flags(sim)
    sim.add_argument("--fleet", required=True)
    sim.add_argument("--assign", choices=("optimized", "baseline"),
                     default="optimized", help="placement to run")
    _add_variant_flags(sim)
    sim.add_argument("--samples", type=int, default=10)
    sim.add_argument("--tokens", type=int, default=10,
                     help="tokens generated per sample")
    sim.add_argument("--ctx", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--time-scale", type=float, default=0.1,
                     help="wall seconds per simulated second")
    sim.add_argument("--beta", type=float, default=0.8)
    sim.add_argument("--base-port", type=int)
    sim.add_argument("--out", help="directory for run_raw.csv and summary.json")
    sim.set_defaults(func=_cmd_simulate)

    cmp_p = sub.add_parser(
        "compare", help="run a variant matrix and write its reports"
    )
    cmp_p.add_argument("--scenario",
                       help="named preset from the scenario library")
    _add_graph_flags(cmp_p)
    cmp_p.add_argument("--fleet")
    _add_variant_flags(cmp_p)
    cmp_p.add_argument("--samples", type=int)
    cmp_p.add_argument("--tokens", type=int)
    cmp_p.add_argument("--ctx", type=int, default=10)
    cmp_p.add_argument("--seed", type=int)
    cmp_p.add_argument("--time-scale", type=float)
    cmp_p.add_argument("--beta", type=float, default=0.8)
    cmp_p.add_argument("--base-port", type=int)
    cmp_p.add_argument("--out", help="directory for the full report file set")
    cmp_p.set_defaults(func=_cmd_compare)

    rep = sub.add_parser(
        "report", help="recompute tables from raw rows and render them"
    )
    rep.add_argument("--out", required=True,
                     help="directory holding run_raw.csv")
    rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _MODULE_ERRORS as exc:
        detail = exc.args[0] if exc.args else str(exc)
        return _fail(str(detail))


if __name__ == "__main__":
    sys.exit(main())
