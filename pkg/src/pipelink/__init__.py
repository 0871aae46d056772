"""Planner and runtime for pipelined model inference across a device fleet.

The pieces compose in pipeline order: profile a computation graph and a
fleet, partition the graph at low-traffic boundaries, solve the
module-to-device assignment under memory budgets, then drive the plan
through a socket ring with shaped links, optional direct skip-value
connections, overlapped hosting, and runtime load rebalancing.
"""

from .assign import (
    AssignmentPlan,
    CostBreakdown,
    CostModel,
    InfeasibleError,
    baseline_assignment,
    brute_force_assignment,
    evaluate_cost,
    load_plan,
    save_plan,
    solve_assignment,
    validate_assignment_plan,
)
from .balance import (
    DeviceSnapshot,
    OverlapAllocation,
    RebalanceDecision,
    RebalanceTrigger,
    TransitionSchedule,
    cut_windows,
    format_rebalance_line,
    movable_modules,
    overlap_allocation,
    plan_rebalance,
    schedule_transition,
    should_rebalance,
    solve_overlap,
)
from .experiments import (
    ExperimentResult,
    ExperimentSpec,
    GraphSource,
    Variant,
    get_scenario,
    read_raw_rows,
    recompute_from_raw,
    run_experiment,
    scenario_library,
    summarize_result,
    write_experiment_outputs,
)
from .fleet import (
    DeviceProfile,
    FleetProfile,
    MonitorError,
    ProbeServer,
    SimulatedDevice,
    load_fleet,
    measure_bandwidth,
    measure_flops,
    measure_link,
    save_fleet,
    snapshot_runtime,
)
from .graph import (
    ComputationGraph,
    GraphError,
    NodeProfile,
    PartitionPlan,
    SubModuleProfile,
    dependency_search,
    find_candidates,
    generate_decoder_graph,
    load_graph,
    module_residual_pairs,
    partition,
    profile_submodules,
    random_layered_graph,
    save_graph,
    traffic_matrix,
)
from .report import (
    compare_runs,
    digests_match,
    format_run_summary,
    load_report,
    ordering_fraction,
    post_trigger_improvement,
    residual_hop_ordering,
    save_report,
)
from .runtime import (
    BalancerConfig,
    DeviceEngine,
    LocalRing,
    Message,
    RunReport,
    RuntimeConfig,
    TokenRecord,
    Workload,
    run_pipeline,
    run_reference,
)
from .runtime.engine import synthetic_execute
from .runtime.pipeline import HopRecord, apply_transition
from .runtime.routing import (
    MODE_DIRECT,
    MODE_PIGGYBACK,
    ResidualRoute,
    TransmissionMap,
    build_transmission_maps,
    transmission_maps_for_plan,
)
from .runtime.shaping import frame_key, traffic_shape
from .scenarios import (
    SCENARIOS,
    prepare_instance,
    random_chain_instance,
    run_hetero_3dev,
    run_lb_midslow,
    run_planner_vs_baseline,
    run_res_vs_piggy,
    run_threads_sweep,
    uniform_fleet,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "BalancerConfig",
    "ComputationGraph",
    "CostBreakdown",
    "CostModel",
    "DeviceEngine",
    "DeviceProfile",
    "DeviceSnapshot",
    "ExperimentResult",
    "ExperimentSpec",
    "FleetProfile",
    "GraphSource",
    "GraphError",
    "HopRecord",
    "InfeasibleError",
    "LocalRing",
    "MODE_DIRECT",
    "MODE_PIGGYBACK",
    "Message",
    "MonitorError",
    "NodeProfile",
    "OverlapAllocation",
    "PartitionPlan",
    "ProbeServer",
    "RebalanceDecision",
    "RebalanceTrigger",
    "ResidualRoute",
    "RunReport",
    "RuntimeConfig",
    "SCENARIOS",
    "SimulatedDevice",
    "SubModuleProfile",
    "TokenRecord",
    "TransitionSchedule",
    "TransmissionMap",
    "Variant",
    "Workload",
    "apply_transition",
    "baseline_assignment",
    "brute_force_assignment",
    "build_transmission_maps",
    "compare_runs",
    "cut_windows",
    "dependency_search",
    "digests_match",
    "evaluate_cost",
    "find_candidates",
    "format_rebalance_line",
    "format_run_summary",
    "frame_key",
    "generate_decoder_graph",
    "get_scenario",
    "load_fleet",
    "load_graph",
    "load_plan",
    "load_report",
    "measure_bandwidth",
    "measure_flops",
    "measure_link",
    "module_residual_pairs",
    "movable_modules",
    "ordering_fraction",
    "overlap_allocation",
    "partition",
    "plan_rebalance",
    "post_trigger_improvement",
    "prepare_instance",
    "profile_submodules",
    "random_chain_instance",
    "random_layered_graph",
    "read_raw_rows",
    "recompute_from_raw",
    "residual_hop_ordering",
    "run_experiment",
    "run_hetero_3dev",
    "run_lb_midslow",
    "run_pipeline",
    "run_planner_vs_baseline",
    "run_reference",
    "run_res_vs_piggy",
    "run_threads_sweep",
    "save_fleet",
    "save_graph",
    "save_plan",
    "save_report",
    "scenario_library",
    "schedule_transition",
    "should_rebalance",
    "snapshot_runtime",
    "solve_assignment",
    "solve_overlap",
    "summarize_result",
    "synthetic_execute",
    "traffic_matrix",
    "traffic_shape",
    "transmission_maps_for_plan",
    "uniform_fleet",
    "validate_assignment_plan",
    "write_experiment_outputs",
]
