"""Experiment harness: a declarative variant matrix over one shared workload.

An ExperimentSpec names a graph source, a fleet, a workload, and the
variants to run; run_experiment executes every variant over real sockets
with the same token stream, checks each run's digests against the
single-process reference, and can flush the result as files: a plan dump,
the overlap and routing tables, per-token raw rows, a JSON summary whose
every metric is recomputable from those rows, and a long-format metric
table for plotting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .assign import (
    DEFAULT_BETA,
    AssignmentPlan,
    CostModel,
    baseline_assignment,
    solve_assignment,
)
from .balance import OverlapAllocation, format_rebalance_line, solve_overlap
from .fleet import FleetProfile, load_fleet
from .graph import ComputationGraph, generate_decoder_graph, load_graph
from .runtime.framing import MsgType
from .runtime.pipeline import (
    BalancerConfig,
    RunReport,
    RuntimeConfig,
    run_pipeline,
)
from .runtime.reference import RunDigests, run_reference
from .runtime.routing import (
    MODE_DIRECT,
    MODE_PIGGYBACK,
    TransmissionMap,
    transmission_maps_for_plan,
)
from .runtime.workload import Workload
from .scenarios import (
    PlannedInstance,
    hetero_3dev_setup,
    lb_midslow_setup,
    prepare_instance,
    res_vs_piggy_setup,
    threads_sweep_setup,
)

RESIDUAL_MODES = {"residual": MODE_DIRECT, "piggyback": MODE_PIGGYBACK}
PLAN_KINDS = ("baseline", "optimized")

RAW_CSV = "run_raw.csv"
SUMMARY_JSON = "summary.json"
COMPARE_CSV = "compare_long.csv"
PLAN_TXT = "plan.txt"
OVERLAP_TXT = "overlap.txt"

_KIND_NAMES = {
    int(MsgType.ACTIVATION): "act",
    int(MsgType.RESIDUAL): "res",
    int(MsgType.LOGITS): "logits",
}


@dataclass(frozen=True)
class Variant:
    """One cell of the comparison grid; everything else is shared."""

    plan: str = "optimized"
    threads: int = 1
    mode: str = "residual"
    balance: bool = False

    def __post_init__(self) -> None:
        if self.plan not in PLAN_KINDS:
            raise ValueError(f"plan must be one of {PLAN_KINDS}, got {self.plan!r}")
        if self.mode not in RESIDUAL_MODES:
            raise ValueError(
                f"mode must be one of {tuple(RESIDUAL_MODES)}, got {self.mode!r}"
            )
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    @property
    def residual_mode(self) -> str:
        return RESIDUAL_MODES[self.mode]

    @property
    def label(self) -> str:
        lb = "lbon" if self.balance else "lboff"
        return f"{self.plan}-t{self.threads}-{self.mode}-{lb}"


@dataclass(frozen=True)
class GraphSource:
    """Where the graph comes from: a file, generator parameters, or a
    prebuilt graph (how the scenario library embeds its custom shapes).
    candidates overrides automatic cut detection when set."""

    path: Optional[str] = None
    gen_blocks: Optional[int] = None
    hidden: int = 1024
    gen_seed: int = 0
    cross_skips: bool = True
    graph: Optional[ComputationGraph] = None
    candidates: Optional[Tuple[int, ...]] = None

    def resolve(self) -> ComputationGraph:
        given = sum(
            x is not None for x in (self.path, self.gen_blocks, self.graph)
        )
        if given != 1:
            raise ValueError(
                "exactly one of path, gen_blocks, or graph must be given"
            )
        if self.graph is not None:
            return self.graph
        if self.path is not None:
            return load_graph(self.path)
        return generate_decoder_graph(
            self.gen_blocks, self.hidden, seed=self.gen_seed,
            cross_skips=self.cross_skips,
        )


@dataclass
class ExperimentSpec:
    """One graph, fleet, and workload, plus the variant grid to compare.

    Every variant replays the identical workload and seed; only the plan
    kind, lane count, residual transport, and balancer toggle vary. The
    first variant is the comparison base for speedup columns.
    """

    name: str
    graph: GraphSource
    fleet: Union[str, FleetProfile]
    variants: Tuple[Variant, ...]
    samples: int = 10
    tokens_per_sample: int = 10
    ctx_len: int = 10
    seed: int = 0
    time_scale: float = 0.1
    beta: float = DEFAULT_BETA
    balancer: Optional[BalancerConfig] = None
    description: str = ""

    def workload(self) -> Workload:
        return Workload(
            num_samples=self.samples,
            tokens_per_sample=self.tokens_per_sample,
            ctx_len=self.ctx_len,
            seed=self.seed,
        )

    def resolve_fleet(self) -> FleetProfile:
        if isinstance(self.fleet, FleetProfile):
            return self.fleet
        return load_fleet(self.fleet)

    def validate(self) -> None:
        if not self.variants:
            raise ValueError("spec declares no variants")
        labels = [v.label for v in self.variants]
        dupes = {l for l in labels if labels.count(l) > 1}
        if dupes:
            raise ValueError(f"duplicate variant labels: {sorted(dupes)}")
        self.workload().validate()


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    instance: PlannedInstance
    plans: Dict[str, AssignmentPlan]
    reference: RunDigests
    reports: Dict[str, RunReport] = field(default_factory=dict)
    digests_ok: Dict[str, bool] = field(default_factory=dict)

    @property
    def all_digests_ok(self) -> bool:
        return bool(self.digests_ok) and all(self.digests_ok.values())

    @property
    def base_label(self) -> str:
        return self.spec.variants[0].label


def run_experiment(
    spec: ExperimentSpec,
    base_port: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ExperimentResult:
    """Run every variant of the spec; write the file set if out_dir is given.

    Variants that completed before a failure are still flushed to out_dir,
    so a broken matrix leaves its finished rows behind.
    """
    spec.validate()
    graph = spec.graph.resolve()
    fleet = spec.resolve_fleet()
    candidates = (
        list(spec.graph.candidates) if spec.graph.candidates is not None else None
    )
    inst = prepare_instance(graph, fleet, beta=spec.beta, candidates=candidates)
    workload = spec.workload()
    plans: Dict[str, AssignmentPlan] = {}
    for kind in dict.fromkeys(v.plan for v in spec.variants):
        plans[kind] = (
            solve_assignment(inst.cost_model)
            if kind == "optimized"
            else baseline_assignment(inst.cost_model)
        )
    reference = run_reference(len(inst.profiles), inst.residual_producers, workload)
    result = ExperimentResult(
        spec=spec, instance=inst, plans=plans, reference=reference
    )
    error: Optional[BaseException] = None
    try:
        for variant in spec.variants:
            config = RuntimeConfig(
                time_scale=spec.time_scale,
                num_threads=variant.threads,
                residual_mode=variant.residual_mode,
                base_port=base_port,
                beta=spec.beta,
                balancer=(
                    (spec.balancer or BalancerConfig()) if variant.balance else None
                ),
            )
            report = run_pipeline(
                plans[variant.plan], inst.profiles, fleet, workload,
                config, inst.return_bytes,
            )
            result.reports[variant.label] = report
            result.digests_ok[variant.label] = (
                report.logits == reference.logits
                and report.sample_digests == reference.sample_digests
                and report.run_digest == reference.run_digest
            )
    except BaseException as exc:
        error = exc
        raise
    finally:
        if out_dir is not None and result.reports:
            try:
                write_experiment_outputs(result, out_dir)
            except Exception:
                if error is None:
                    raise
    return result


# --- the named presets --------------------------------------------------------

def scenario_library() -> Dict[str, ExperimentSpec]:
    """Named experiment presets, built from the calibrated scenario setups."""

    def from_setup(name, setup, variants, description):
        w = setup.workload
        return ExperimentSpec(
            name=name,
            graph=GraphSource(
                graph=setup.graph,
                candidates=(
                    tuple(setup.candidates) if setup.candidates is not None else None
                ),
            ),
            fleet=setup.fleet,
            variants=tuple(variants),
            samples=w.num_samples,
            tokens_per_sample=w.tokens_per_sample,
            ctx_len=w.ctx_len,
            seed=w.seed,
            time_scale=setup.time_scale,
            balancer=setup.balancer,
            description=description,
        )

    return {
        "hetero-3dev": from_setup(
            "hetero-3dev", hetero_3dev_setup(),
            [Variant(plan="baseline"), Variant(plan="optimized")],
            "even split vs optimized placement on a 3:3:1 fleet",
        ),
        "lb-midslow": from_setup(
            "lb-midslow", lb_midslow_setup(),
            [
                Variant(plan="baseline"),
                Variant(plan="baseline", balance=True),
            ],
            "slow middle device, balancer off vs on",
        ),
        "resvspiggy-3dev": from_setup(
            "resvspiggy-3dev", res_vs_piggy_setup(),
            [
                Variant(plan="optimized", mode="piggyback"),
                Variant(plan="optimized", mode="residual"),
            ],
            "skip-value transport: relayed inside activations vs direct",
        ),
        "threads-sweep": from_setup(
            "threads-sweep", threads_sweep_setup(),
            [Variant(plan="baseline", threads=k) for k in (1, 2, 3, 4, 5)],
            "in-flight sample sweep on an even ring",
        ),
    }


def get_scenario(name: str) -> ExperimentSpec:
    library = scenario_library()
    if name not in library:
        known = ", ".join(sorted(library))
        raise KeyError(f"unknown scenario {name!r}; available: {known}")
    return library[name]


# --- plan and overlap dumps ----------------------------------------------------

def render_plan_text(plans: Dict[str, AssignmentPlan], cm: CostModel) -> str:
    lines: List[str] = []
    for kind, plan in plans.items():
        spans = plan.ranges()
        lines.append(
            f"placement kind={kind} modules={plan.num_modules} "
            f"devices={len(plan.device_order)}"
        )
        lines.append(f"objective {plan.objective:.9g}")
        if plan.t_compute is not None:
            lines.append(f"compute_sec {plan.t_compute:.9g}")
        if plan.t_data is not None:
            lines.append(f"data_sec {plan.t_data:.9g}")
        lines.append("ring " + " ".join(str(d) for d in plan.device_order))
        for dev in plan.device_order:
            lo, hi = spans[dev]
            mem = sum(cm.mem_mod[j] for j in range(lo, hi + 1))
            flops = sum(cm.flops_mod[j] for j in range(lo, hi + 1))
            lines.append(
                f"device {dev} modules {lo}..{hi} flops {flops:.6g} "
                f"mem_bytes {mem} budget_bytes {cm.budget(dev):.0f}"
            )
        lines.append("")
    return "\n".join(lines)


def _span_text(span: Optional[Tuple[int, int]]) -> str:
    return f"{span[0]}..{span[1]}" if span else "none"


def render_overlap_text(
    allocations: Dict[str, OverlapAllocation],
    maps: Dict[str, Dict[str, Dict[int, TransmissionMap]]],
) -> str:
    """Hosted-vs-active spans per plan kind, then routing per transport."""
    lines: List[str] = []
    for kind, alloc in allocations.items():
        lines.append(f"overlap v1 kind={kind}")
        lines.append("ring " + " ".join(str(d) for d in alloc.device_order))
        for dev in alloc.device_order:
            lines.append(
                f"device {dev} active {_span_text(alloc.active.get(dev))} "
                f"hosted {_span_text(alloc.hosted.get(dev))}"
            )
        for mode, per_dev in maps.get(kind, {}).items():
            lines.append(f"transmission kind={kind} mode={mode}")
            for dev in alloc.device_order:
                tm = per_dev[dev]
                seq = "none" if tm.sequential_target is None else tm.sequential_target
                order = ",".join(str(d) for d in tm.send_order) or "none"
                ret = (
                    f"{tm.return_route[0]}->{tm.return_route[1]}"
                    if tm.return_route
                    else "none"
                )
                lines.append(
                    f"device {dev} seq_target {seq} send_order {order} "
                    f"return {ret}"
                )
                for r in tm.residual_routes:
                    lines.append(
                        f"  route m{r.source_module} -> dev{r.target_device}"
                        f":m{r.target_module} bytes {r.sim_bytes}"
                    )
                for r in tm.piggyback_carries:
                    lines.append(
                        f"  carry m{r.source_module} -> dev{r.target_device}"
                        f":m{r.target_module} bytes {r.sim_bytes}"
                    )
                for producer, consumer in tm.local_pairs:
                    lines.append(f"  local m{producer} -> m{consumer}")
        lines.append("")
    return "\n".join(lines)


# --- raw per-token rows ---------------------------------------------------------

def _hop_categories(reports: Dict[str, RunReport]) -> List[Tuple[int, int, int]]:
    cats = {
        (h.src, h.dst, h.kind)
        for rep in reports.values()
        for h in rep.hop_log
        if h.kind in _KIND_NAMES
    }
    return sorted(cats)


def _hop_column(cat: Tuple[int, int, int]) -> str:
    src, dst, kind = cat
    return f"hop_{src}to{dst}_{_KIND_NAMES[kind]}"


def raw_header(
    device_ids: Sequence[int], categories: Sequence[Tuple[int, int, int]]
) -> List[str]:
    return (
        ["token", "sample", "latency_sec"]
        + [f"device_busy_{d}" for d in device_ids]
        + [_hop_column(c) for c in categories]
        + ["t_start_sim", "t_end_sim", "variant"]
    )


def raw_rows(
    label: str,
    report: RunReport,
    device_ids: Sequence[int],
    categories: Sequence[Tuple[int, int, int]],
) -> List[List[object]]:
    """Per-token rows; hop cells sum the token's sim seconds per category."""
    scale = report.time_scale if report.time_scale > 0 else 1.0
    hop_sums: Dict[Tuple[int, int], Dict[Tuple[int, int, int], float]] = {}
    for h in report.hop_log:
        if h.kind not in _KIND_NAMES:
            continue
        per = hop_sums.setdefault((h.sample, h.token), {})
        cat = (h.src, h.dst, h.kind)
        per[cat] = per.get(cat, 0.0) + h.wall_seconds / scale
    rows = []
    for rec in report.tokens:
        busy = [
            report.token_busy.get(d, {}).get((rec.sample, rec.token), 0.0)
            for d in device_ids
        ]
        hops = hop_sums.get((rec.sample, rec.token), {})
        rows.append(
            [rec.token, rec.sample, rec.wall_latency / scale]
            + busy
            + [hops.get(c, 0.0) for c in categories]
            + [
                (rec.start - report.wall_start) / scale,
                (rec.end - report.wall_start) / scale,
                label,
            ]
        )
    return rows


def write_run_raw(
    path: Union[str, Path], reports: Dict[str, RunReport], device_ids: Sequence[int]
) -> None:
    categories = _hop_categories(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(raw_header(device_ids, categories))
        for label, report in reports.items():
            for row in raw_rows(label, report, device_ids, categories):
                writer.writerow(
                    [f"{v:.9g}" if isinstance(v, float) else v for v in row]
                )


# --- summaries ------------------------------------------------------------------

def _quantile(sorted_vals: Sequence[float], q: float) -> float:
    # nearest-rank on the sorted sample; stable and recomputable
    idx = round(q * (len(sorted_vals) - 1))
    return sorted_vals[idx]


def summarize_report(report: RunReport, device_ids: Sequence[int]) -> dict:
    """Per-variant metrics, each recomputable from the raw rows."""
    lat = sorted(report.latencies_sim())
    elapsed = report.sim_seconds
    scale = report.time_scale if report.time_scale > 0 else 1.0
    hop_table: Dict[str, Dict[str, float]] = {}
    for h in report.hop_log:
        if h.kind not in _KIND_NAMES:
            continue
        cell = hop_table.setdefault(
            _hop_column((h.src, h.dst, h.kind)),
            {"total_sim_sec": 0.0, "mean_sim_sec_per_token": 0.0},
        )
        cell["total_sim_sec"] += h.wall_seconds / scale
    for cell in hop_table.values():
        cell["mean_sim_sec_per_token"] = cell["total_sim_sec"] / max(
            report.total_tokens, 1
        )
    return {
        "ring": list(report.device_order),
        "mode": report.residual_mode,
        "threads": report.num_threads,
        "tokens": report.total_tokens,
        "elapsed_sim_sec": elapsed,
        "tokens_per_sec": report.throughput_tokens_per_sim_sec,
        "latency_sim": {
            "mean": sum(lat) / len(lat),
            "p50": _quantile(lat, 0.50),
            "p90": _quantile(lat, 0.90),
            "min": lat[0],
            "max": lat[-1],
        },
        "busy_fraction": {
            str(d): report.device_busy_sim.get(d, 0.0) / elapsed
            for d in device_ids
        },
        "hop_table": hop_table,
        "rebalance_events": [
            format_rebalance_line(
                e.token_seq,
                e.trigger_device,
                e.moved,
                e.est_release_sec + e.est_reload_sec,
            )
            + ("" if e.applied else " (not applied)")
            for e in report.rebalances
        ],
        "transition_overheads": {
            "est_release_sec": sum(
                e.est_release_sec for e in report.rebalances if e.applied
            ),
            "est_reload_sec": sum(
                e.est_reload_sec for e in report.rebalances if e.applied
            ),
            "measured_reload_sim": {
                str(d): report.device_reload_sim.get(d, 0.0) for d in device_ids
            },
        },
        "run_digest": report.run_digest,
        "sample_digests": {str(s): v for s, v in report.sample_digests.items()},
    }


def summarize_result(result: ExperimentResult) -> dict:
    spec = result.spec
    device_ids = [d.device_id for d in result.instance.fleet.devices]
    variants = {}
    for variant in spec.variants:
        label = variant.label
        if label not in result.reports:
            continue
        entry = summarize_report(result.reports[label], device_ids)
        entry.update(
            plan=variant.plan,
            threads=variant.threads,
            mode_flag=variant.mode,
            balance=variant.balance,
            digests_match_reference=result.digests_ok[label],
        )
        variants[label] = entry
    return {
        "name": spec.name,
        "description": spec.description,
        "seed": spec.seed,
        "time_scale": spec.time_scale,
        "beta": spec.beta,
        "workload": {
            "samples": spec.samples,
            "tokens_per_sample": spec.tokens_per_sample,
            "ctx_len": spec.ctx_len,
        },
        "base_variant": result.base_label,
        "reference_run_digest": result.reference.run_digest,
        "variants": variants,
    }


def long_rows(summary: dict) -> List[Tuple[str, str, float]]:
    """Flatten a summary into (variant, metric, value) rows for plotting."""
    base = summary["variants"].get(summary["base_variant"])
    rows: List[Tuple[str, str, float]] = []
    for label, entry in summary["variants"].items():
        rows.append((label, "tokens_per_sec", entry["tokens_per_sec"]))
        if base is not None and base["tokens_per_sec"] > 0:
            rows.append(
                (label, "speedup", entry["tokens_per_sec"] / base["tokens_per_sec"])
            )
        for stat, value in entry["latency_sim"].items():
            rows.append((label, f"latency_{stat}_sim", value))
        for dev, frac in entry["busy_fraction"].items():
            rows.append((label, f"busy_fraction_{dev}", frac))
        for col, cell in entry["hop_table"].items():
            rows.append((label, f"{col}_mean_sim", cell["mean_sim_sec_per_token"]))
        rows.append((label, "rebalances_applied", float(len([
            line for line in entry["rebalance_events"]
            if not line.endswith("(not applied)")
        ]))))
    return rows


def write_compare_long(
    path: Union[str, Path], rows: Sequence[Tuple[str, str, float]]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "metric", "value"])
        for variant, metric, value in rows:
            writer.writerow([variant, metric, f"{value:.9g}"])


def write_experiment_outputs(
    result: ExperimentResult, out_dir: Union[str, Path]
) -> List[Path]:
    """Flush the full file set for a (possibly partial) experiment result."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = result.spec
    cm = result.instance.cost_model
    written: List[Path] = []

    plan_path = out / PLAN_TXT
    plan_path.write_text(render_plan_text(result.plans, cm))
    written.append(plan_path)

    allocations = {
        kind: solve_overlap(plan, cm) for kind, plan in result.plans.items()
    }
    modes_used = sorted({v.residual_mode for v in spec.variants})
    maps = {
        kind: {
            mode: transmission_maps_for_plan(
                plan,
                result.instance.profiles,
                result.instance.fleet,
                mode,
                return_bytes=result.instance.return_bytes,
            )
            for mode in modes_used
        }
        for kind, plan in result.plans.items()
    }
    overlap_path = out / OVERLAP_TXT
    overlap_path.write_text(render_overlap_text(allocations, maps))
    written.append(overlap_path)

    device_ids = [d.device_id for d in result.instance.fleet.devices]
    raw_path = out / RAW_CSV
    write_run_raw(raw_path, result.reports, device_ids)
    written.append(raw_path)

    summary = summarize_result(result)
    summary_path = out / SUMMARY_JSON
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(summary_path)

    compare_path = out / COMPARE_CSV
    write_compare_long(compare_path, long_rows(summary))
    written.append(compare_path)
    return written


# --- recomputation from raw rows ------------------------------------------------

def read_raw_rows(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def recompute_from_raw(rows: Sequence[dict]) -> Dict[str, dict]:
    """Rebuild the per-variant headline metrics from raw rows alone.

    The report command and the integrity tests both use this, so a summary
    that drifts from its own raw rows cannot go unnoticed.
    """
    by_variant: Dict[str, List[dict]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    out: Dict[str, dict] = {}
    for label, group in by_variant.items():
        lat = sorted(float(r["latency_sec"]) for r in group)
        t_start = min(float(r["t_start_sim"]) for r in group)
        t_end = max(float(r["t_end_sim"]) for r in group)
        elapsed = t_end - t_start
        busy_cols = [c for c in group[0] if c.startswith("device_busy_")]
        hop_cols = [c for c in group[0] if c.startswith("hop_")]
        out[label] = {
            "tokens": len(group),
            "elapsed_sim_sec": elapsed,
            "tokens_per_sec": len(group) / elapsed if elapsed > 0 else float("inf"),
            "latency_sim": {
                "mean": sum(lat) / len(lat),
                "p50": _quantile(lat, 0.50),
                "p90": _quantile(lat, 0.90),
                "min": lat[0],
                "max": lat[-1],
            },
            "busy_fraction": {
                col[len("device_busy_"):]: (
                    sum(float(r[col]) for r in group) / elapsed
                    if elapsed > 0
                    else 0.0
                )
                for col in busy_cols
            },
            "hop_table": {
                col: {
                    "total_sim_sec": sum(float(r[col]) for r in group),
                    "mean_sim_sec_per_token": (
                        sum(float(r[col]) for r in group) / len(group)
                    ),
                }
                for col in hop_cols
                if any(float(r[col]) != 0.0 for r in group)
            },
        }
    return out
