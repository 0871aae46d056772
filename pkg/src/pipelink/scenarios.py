"""Calibrated end-to-end scenarios used by the acceptance suite and the CLI.

Each scenario builds a graph, a fleet, and a workload whose numbers are
chosen so the behaviour under test dominates measurement noise: planner
gains come from memory budgets that force work onto a slow device, the
rebalance demo starts from an even split with a slow middle device, the
transport comparison routes a mid-size skip value across two hops, and the
lane sweep is hop-heavy so pipelining pays off.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .assign import (
    AssignmentPlan,
    CostModel,
    baseline_assignment,
    solve_assignment,
)
from .fleet import DeviceProfile, FleetProfile
from .graph import (
    ComputationGraph,
    NodeProfile,
    SubModuleProfile,
    find_candidates,
    generate_decoder_graph,
    partition,
    profile_submodules,
)
from .report import (
    digests_match,
    ordering_fraction,
    post_trigger_improvement,
    residual_hop_ordering,
)
from .runtime.pipeline import BalancerConfig, RunReport, RuntimeConfig, run_pipeline
from .runtime.reference import run_reference
from .runtime.routing import MODE_DIRECT, MODE_PIGGYBACK, producers_by_consumer
from .runtime.workload import Workload

MB = 1_000_000


def uniform_fleet(
    speeds: Sequence[float],
    mem_avail: Sequence[int],
    mem_total: Sequence[int],
    bandwidth_bps: float,
    latency_sec: float,
) -> FleetProfile:
    m = len(speeds)
    devices = [
        DeviceProfile(
            device_id=i,
            flops_per_sec=speeds[i],
            mem_total_bytes=mem_total[i],
            mem_avail_bytes=mem_avail[i],
        )
        for i in range(m)
    ]
    bandwidth = [
        [0.0 if i == j else bandwidth_bps for j in range(m)] for i in range(m)
    ]
    latency = [
        [0.0 if i == j else latency_sec for j in range(m)] for i in range(m)
    ]
    return FleetProfile(devices=devices, bandwidth=bandwidth, latency=latency)


@dataclass
class PlannedInstance:
    """A graph partitioned, profiled, and ready to assign and run."""

    graph: ComputationGraph
    fleet: FleetProfile
    profiles: List[SubModuleProfile]
    cost_model: CostModel
    return_bytes: int
    residual_producers: Dict[int, List[int]]


@dataclass
class ScenarioSetup:
    """Graph, fleet, workload, and runtime defaults for one named scenario.

    The scenario runners below and the experiment library both start from
    these, so a calibration change lands in every consumer at once.
    """

    graph: ComputationGraph
    candidates: Optional[List[int]]
    fleet: FleetProfile
    workload: Workload
    time_scale: float
    balancer: Optional[BalancerConfig] = None


def prepare_instance(
    graph: ComputationGraph,
    fleet: FleetProfile,
    beta: float = 0.8,
    candidates: Optional[Sequence[int]] = None,
) -> PlannedInstance:
    chosen = list(candidates) if candidates is not None else find_candidates(graph)
    plan = partition(graph, chosen)
    profiles = profile_submodules(graph, plan)
    return_bytes = graph.node(graph.sink).out_bytes
    cost_model = CostModel.from_profiles(
        profiles, fleet, beta=beta, return_bytes=return_bytes
    )
    pairs = sorted(
        (p.index, consumer)
        for p in profiles
        for consumer in p.out_to
        if consumer != p.index + 1
    )
    return PlannedInstance(
        graph=graph,
        fleet=fleet,
        profiles=profiles,
        cost_model=cost_model,
        return_bytes=return_bytes,
        residual_producers=producers_by_consumer(pairs),
    )


def _verify_digests(inst: PlannedInstance, workload: Workload, report: RunReport) -> bool:
    expected = run_reference(len(inst.profiles), inst.residual_producers, workload)
    return (
        report.logits == expected.logits
        and report.sample_digests == expected.sample_digests
        and report.run_digest == expected.run_digest
    )


# --- planner gain on a heterogeneous fleet ---------------------------------

def hetero_3dev_setup() -> ScenarioSetup:
    return ScenarioSetup(
        graph=generate_decoder_graph(6, 2048, seed=7),
        candidates=None,
        fleet=uniform_fleet(
            speeds=[3e9, 3e9, 1e9],
            mem_avail=[762 * MB, 762 * MB, 850 * MB],
            mem_total=[1000 * MB, 1000 * MB, 1100 * MB],
            bandwidth_bps=50e6,
            latency_sec=0.001,
        ),
        workload=Workload(num_samples=3, tokens_per_sample=5, ctx_len=128, seed=11),
        time_scale=0.2,
    )


def run_hetero_3dev(
    base_port: Optional[int] = None, time_scale: Optional[float] = None
) -> dict:
    """Two fast devices and one slow one, with budgets that make the even
    split park heavy work on the slow device. The optimizer reorders the
    ring and shrinks the slow device's share to one block."""
    setup = hetero_3dev_setup()
    fleet = setup.fleet
    inst = prepare_instance(setup.graph, fleet)
    optimized = solve_assignment(inst.cost_model)
    baseline = baseline_assignment(inst.cost_model)
    workload = setup.workload
    config = RuntimeConfig(
        time_scale=setup.time_scale if time_scale is None else time_scale,
        num_threads=1,
        residual_mode=MODE_DIRECT,
        base_port=base_port,
    )
    rep_opt = run_pipeline(
        optimized, inst.profiles, fleet, workload, config, inst.return_bytes
    )
    rep_base = run_pipeline(
        baseline, inst.profiles, fleet, workload, config, inst.return_bytes
    )
    return {
        "optimized_plan": optimized,
        "baseline_plan": baseline,
        "objective_ratio": baseline.objective / optimized.objective,
        "latency_ratio": rep_base.mean_latency_sim() / rep_opt.mean_latency_sim(),
        "optimized_report": rep_opt,
        "baseline_report": rep_base,
        "digests_ok": (
            _verify_digests(inst, workload, rep_opt)
            and digests_match(rep_opt, rep_base)
        ),
    }


# --- rebalancing away from a slow middle device ----------------------------

def lb_midslow_setup() -> ScenarioSetup:
    return ScenarioSetup(
        graph=generate_decoder_graph(5, 2048, seed=3),
        candidates=None,
        fleet=uniform_fleet(
            speeds=[3e9, 1e9, 3e9],
            mem_avail=[1200 * MB] * 3,
            mem_total=[1500 * MB] * 3,
            bandwidth_bps=20e6,
            latency_sec=0.002,
        ),
        workload=Workload(num_samples=10, tokens_per_sample=8, ctx_len=128, seed=5),
        time_scale=0.1,
        balancer=BalancerConfig(
            theta=1.5,
            window_tokens=10,
            enable_after_samples=2,
            poll_interval=0.02,
            max_rebalances=2,
        ),
    )


def run_lb_midslow(
    base_port: Optional[int] = None, time_scale: Optional[float] = None
) -> dict:
    """Even split over fast-slow-fast devices. The middle device's busy
    window dominates the median, the balancer shifts its blocks onto the
    fast neighbours (who already host copies), and later samples run with
    the middle device forwarding only. A balancer-off twin of the same run
    prices what staying put would have cost; the rebalanced run carries
    its own release and reload charges in the timeline."""
    setup = lb_midslow_setup()
    fleet = setup.fleet
    inst = prepare_instance(setup.graph, fleet)
    plan = baseline_assignment(inst.cost_model)
    workload = setup.workload

    def config(balance: bool) -> RuntimeConfig:
        return RuntimeConfig(
            time_scale=setup.time_scale if time_scale is None else time_scale,
            num_threads=1,
            residual_mode=MODE_DIRECT,
            base_port=base_port,
            balancer=setup.balancer if balance else None,
        )

    report = run_pipeline(
        plan, inst.profiles, fleet, workload, config(True), inst.return_bytes
    )
    report_off = run_pipeline(
        plan, inst.profiles, fleet, workload, config(False), inst.return_bytes
    )
    improvement = post_trigger_improvement(report)
    switch = improvement["switch_sample"]
    vs_off = None
    if switch is not None:
        mean_on = report.mean_latency_sim(sample_min=switch)
        mean_off = report_off.mean_latency_sim(sample_min=switch)
        vs_off = {
            "switch_sample": switch,
            "mean_on_sim": mean_on,
            "mean_off_sim": mean_off,
            "improvement": 1.0 - mean_on / mean_off,
        }
    return {
        "plan": plan,
        "report": report,
        "report_off": report_off,
        "improvement": improvement,
        "improvement_vs_off": vs_off,
        "applied_rebalances": sum(1 for e in report.rebalances if e.applied),
        "digests_ok": (
            _verify_digests(inst, workload, report)
            and digests_match(report, report_off)
        ),
    }


# --- residual transport comparison -----------------------------------------

def skip_stage_graph() -> Tuple[ComputationGraph, List[int]]:
    """Three stages; stage one's gate value skips stage two entirely.

    Chain activations are 1.5 MB and the gate value 15 KB. Piggybacking
    carries the gate inside two activation hops and holds it to the
    sequential pace; a direct connection moves it off the critical path
    the moment it exists.
    """
    specs = [
        ("embed", 2e6, 20 * MB, 1_500_000),
        ("norm", 1e6, 4 * MB, 1_500_000),
        ("core", 9e7, 150 * MB, 1_500_000),
        ("gate", 4e6, 8 * MB, 15_360),
        ("merge", 1e6, 1 * MB, 1_500_000),
        ("norm", 1e6, 4 * MB, 1_500_000),
        ("core", 9e7, 150 * MB, 1_500_000),
        ("merge", 1e6, 1 * MB, 1_500_000),
        ("norm", 1e6, 4 * MB, 1_500_000),
        ("core", 9e7, 150 * MB, 1_500_000),
        ("merge", 1e6, 1 * MB, 1_500_000),
        ("head", 6e6, 30 * MB, 100_000),
    ]
    nodes = [
        NodeProfile(i, kind, int(flops), int(mem), int(out))
        for i, (kind, flops, mem, out) in enumerate(specs)
    ]
    edges = [
        (0, 1),
        (1, 2), (1, 3), (1, 4),
        (2, 4),
        (3, 10),
        (4, 5),
        (5, 6), (5, 7),
        (6, 7),
        (7, 8),
        (8, 9), (8, 10),
        (9, 10),
        (10, 11),
    ]
    graph = ComputationGraph(nodes=nodes, edges=edges, topo_order=list(range(12)))
    graph.validate()
    return graph, [5, 8]


def res_vs_piggy_setup() -> ScenarioSetup:
    graph, cuts = skip_stage_graph()
    return ScenarioSetup(
        graph=graph,
        candidates=cuts,
        fleet=uniform_fleet(
            speeds=[1e9, 1e9, 1e9],
            mem_avail=[400 * MB] * 3,
            mem_total=[500 * MB] * 3,
            bandwidth_bps=20e6,
            latency_sec=0.005,
        ),
        workload=Workload(num_samples=5, tokens_per_sample=4, ctx_len=64, seed=17),
        time_scale=1.0,
    )


def run_res_vs_piggy(
    base_port: Optional[int] = None, time_scale: Optional[float] = None
) -> dict:
    """Same plan and workload under both residual transports. Direct
    delivery keeps the skip value off the activation path and lands it
    early; piggybacking inflates two activation hops by the gate size and
    delivers it with the activation, so direct should win on both mean
    latency and per-token hop ordering, with identical digests."""
    setup = res_vs_piggy_setup()
    fleet = setup.fleet
    inst = prepare_instance(setup.graph, fleet, candidates=setup.candidates)
    plan = solve_assignment(inst.cost_model)
    workload = setup.workload
    reports = {}
    for mode in (MODE_DIRECT, MODE_PIGGYBACK):
        config = RuntimeConfig(
            time_scale=setup.time_scale if time_scale is None else time_scale,
            num_threads=1,
            residual_mode=mode,
            base_port=base_port,
        )
        reports[mode] = run_pipeline(
            plan, inst.profiles, fleet, workload, config, inst.return_bytes
        )
    direct, piggy = reports[MODE_DIRECT], reports[MODE_PIGGYBACK]
    return {
        "plan": plan,
        "direct_report": direct,
        "piggyback_report": piggy,
        "direct_wins_fraction": ordering_fraction(direct, piggy),
        "hop_order_fraction": residual_hop_ordering(direct, piggy),
        "mean_direct_sim": direct.mean_latency_sim(),
        "mean_piggy_sim": piggy.mean_latency_sim(),
        "digests_equal": digests_match(direct, piggy),
        "digests_ok": _verify_digests(inst, workload, direct),
    }


# --- in-flight sample sweep --------------------------------------------------

def threads_sweep_setup() -> ScenarioSetup:
    return ScenarioSetup(
        graph=generate_decoder_graph(5, 1024, seed=9, cross_skips=False),
        candidates=None,
        fleet=uniform_fleet(
            speeds=[1e9, 1e9, 1e9],
            mem_avail=[400 * MB] * 3,
            mem_total=[500 * MB] * 3,
            bandwidth_bps=50e6,
            latency_sec=0.03,
        ),
        # sixty samples split evenly over any lane count in 1..5, so lane
        # imbalance at the tail never masks the saturation trend
        workload=Workload(num_samples=60, tokens_per_sample=6, ctx_len=128, seed=13),
        time_scale=0.05,
    )


def run_threads_sweep(
    base_port: Optional[int] = None,
    time_scale: Optional[float] = None,
    lane_counts: Sequence[int] = (1, 2, 3, 4, 5),
) -> dict:
    """Hop-heavy even ring driven with increasing in-flight samples. Two
    lanes double throughput; beyond the ring's saturation point extra lanes
    add nothing, so increments shrink."""
    setup = threads_sweep_setup()
    fleet = setup.fleet
    inst = prepare_instance(setup.graph, fleet)
    plan = baseline_assignment(inst.cost_model)
    workload = setup.workload
    throughput: Dict[int, float] = {}
    digests_ok = True
    reports: Dict[int, RunReport] = {}
    for k in lane_counts:
        config = RuntimeConfig(
            time_scale=setup.time_scale if time_scale is None else time_scale,
            num_threads=k,
            residual_mode=MODE_DIRECT,
            base_port=base_port,
        )
        report = run_pipeline(
            plan, inst.profiles, fleet, workload, config, inst.return_bytes
        )
        throughput[k] = report.throughput_tokens_per_sim_sec
        digests_ok = digests_ok and _verify_digests(inst, workload, report)
        reports[k] = report
    return {
        "plan": plan,
        "throughput": throughput,
        "reports": reports,
        "digests_ok": digests_ok,
    }


# --- randomized planner-vs-baseline instances --------------------------------

def random_chain_instance(seed: int) -> PlannedInstance:
    """Residual-free random chain on a small random fleet.

    Memory budgets range from roomy (the planner concentrates work on the
    fastest device) to tight (it must spread), so screened seed sets cover
    single-device and multi-device optima.
    """
    rng = random.Random(seed)
    num_blocks = rng.randint(3, 5)
    hidden = rng.choice([512, 1024])
    graph = generate_decoder_graph(
        num_blocks, hidden, seed=seed, cross_skips=False
    )
    m = rng.randint(2, 3)
    speeds = [rng.uniform(1e9, 4e9) for _ in range(m)]
    plan = partition(graph, find_candidates(graph))
    profiles = profile_submodules(graph, plan)
    total_mem = sum(p.mem_bytes for p in profiles)
    mem_avail = [
        int(total_mem / 0.8 * rng.uniform(0.55, 1.45)) for _ in range(m)
    ]
    mem_total = [int(v * 1.25) for v in mem_avail]
    devices = [
        DeviceProfile(i, speeds[i], mem_total[i], mem_avail[i]) for i in range(m)
    ]
    bandwidth = [
        [0.0 if i == j else rng.uniform(20e6, 80e6) for j in range(m)]
        for i in range(m)
    ]
    latency = [
        [0.0 if i == j else rng.uniform(0.001, 0.01) for j in range(m)]
        for i in range(m)
    ]
    fleet = FleetProfile(devices=devices, bandwidth=bandwidth, latency=latency)
    return prepare_instance(graph, fleet)


def run_planner_vs_baseline(
    seed: int,
    base_port: Optional[int] = None,
    time_scale: float = 0.5,
) -> dict:
    """Solve and simulate one random instance against the even split."""
    inst = random_chain_instance(seed)
    optimized = solve_assignment(inst.cost_model)
    baseline = baseline_assignment(inst.cost_model)
    workload = Workload(num_samples=2, tokens_per_sample=4, ctx_len=64, seed=seed)
    config = RuntimeConfig(
        time_scale=time_scale, num_threads=1, base_port=base_port
    )
    rep_opt = run_pipeline(
        optimized, inst.profiles, inst.fleet, workload, config, inst.return_bytes
    )
    rep_base = run_pipeline(
        baseline, inst.profiles, inst.fleet, workload, config, inst.return_bytes
    )
    return {
        "seed": seed,
        "objective_ratio": baseline.objective / optimized.objective,
        "latency_ratio": rep_base.mean_latency_sim() / rep_opt.mean_latency_sim(),
        "digests_ok": (
            _verify_digests(inst, workload, rep_opt)
            and digests_match(rep_opt, rep_base)
        ),
    }


SCENARIOS: Dict[str, Callable[..., dict]] = {
    "hetero-3dev": run_hetero_3dev,
    "lb-midslow": run_lb_midslow,
    "resvspiggy-3dev": run_res_vs_piggy,
    "threads-sweep": run_threads_sweep,
}
