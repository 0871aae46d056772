"""Independent oracles and tiny builders shared across the test suite.

Everything here re-derives expected values from first principles, without
calling the implementation paths under test, so the tests compare two
separately written computations.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Set, Tuple

from pipelink import (
    ComputationGraph,
    CostModel,
    DeviceProfile,
    FleetProfile,
    NodeProfile,
)


# --- graph oracles -----------------------------------------------------------

def degree_scan_candidates(graph: ComputationGraph) -> List[int]:
    """Brute-force degree count over every node and edge."""
    indeg = {v.node_id: 0 for v in graph.nodes}
    outdeg = {v.node_id: 0 for v in graph.nodes}
    for src, dst in graph.edges:
        outdeg[src] += 1
        indeg[dst] += 1
    picked = [v for v in graph.topo_order if outdeg[v] > 1 and indeg[v] == 1]
    return picked


def classify_edges_by_gap(
    graph: ComputationGraph, subgraphs: Sequence[Sequence[int]]
) -> Tuple[Set[tuple], Set[tuple], Set[tuple]]:
    """Exhaustive scan of all edges into (intra, sequential, residual) sets."""
    owner: Dict[int, int] = {}
    for idx, nodes in enumerate(subgraphs):
        for v in nodes:
            owner[v] = idx
    intra, seq, res = set(), set(), set()
    for src, dst in graph.edges:
        i, k = owner[src], owner[dst]
        if i == k:
            intra.add((src, dst))
        elif k == i + 1:
            seq.add((i, src, k, dst))
        else:
            res.add((i, src, k, dst))
    return intra, seq, res


def edge_walk_traffic(
    graph: ComputationGraph, subgraphs: Sequence[Sequence[int]]
) -> Dict[Tuple[int, int], int]:
    """Cross-boundary bytes per (producer, consumer) sub-module pair.

    A producer node's output counts once per consuming sub-module even when
    several of its edges land there.
    """
    owner: Dict[int, int] = {}
    for idx, nodes in enumerate(subgraphs):
        for v in nodes:
            owner[v] = idx
    seen: Set[Tuple[int, int, int]] = set()
    traffic: Dict[Tuple[int, int], int] = {}
    for src, dst in graph.edges:
        i, k = owner[src], owner[dst]
        if i == k or (src, i, k) in seen:
            continue
        seen.add((src, i, k))
        out = next(n.out_bytes for n in graph.nodes if n.node_id == src)
        traffic[(i, k)] = traffic.get((i, k), 0) + out
    return traffic


# --- assignment cost oracle ----------------------------------------------------

def naive_cost(x: Sequence[Sequence[int]], cm: CostModel) -> Tuple[float, float]:
    """(compute, data) seconds by looping over every module and edge pair."""
    m, n = len(x), len(x[0])
    host = []
    for j in range(n):
        owners = [i for i in range(m) if x[i][j]]
        assert len(owners) == 1, f"column {j} hosted by {owners}"
        host.append(owners[0])
    compute = sum(cm.exec_time[host[j]][j] for j in range(n))
    pair_bytes: Dict[Tuple[int, int], int] = {}
    for j in range(n):
        for k in range(j + 1, n):
            size = cm.module_traffic[j][k]
            if size and host[j] != host[k]:
                pair = (host[j], host[k])
                pair_bytes[pair] = pair_bytes.get(pair, 0) + size
    data = sum(
        cm.latency[a][b] + size / cm.bandwidth[a][b]
        for (a, b), size in pair_bytes.items()
    )
    if cm.return_bytes > 0 and n > 0 and host[n - 1] != host[0]:
        a, b = host[n - 1], host[0]
        data += cm.latency[a][b] + cm.return_bytes / cm.bandwidth[a][b]
    return compute, data


def memory_loads(x: Sequence[Sequence[int]], cm: CostModel) -> List[int]:
    return [
        sum(cm.mem_mod[j] for j in range(len(x[0])) if x[i][j])
        for i in range(len(x))
    ]


# --- overlap extension oracle ----------------------------------------------------

def best_extension(
    base_span: Tuple[int, int],
    left_limit: int,
    right_limit: int,
    mem_mod: Sequence[int],
    budget: float,
) -> Tuple[int, int]:
    """Enumerate every (left, right) extension pair and pick the optimum.

    Optimum: most extra resident bytes, ties to the wider extension, then
    to the left side. left_limit/right_limit cap how many modules exist to
    take on each side.
    """
    lo, hi = base_span
    base = sum(mem_mod[j] for j in range(lo, hi + 1))
    best = (0, 0)
    best_key = (-1.0, -1, -1)
    for a in range(left_limit + 1):
        for b in range(right_limit + 1):
            extra = sum(mem_mod[j] for j in range(lo - a, lo)) + sum(
                mem_mod[j] for j in range(hi + 1, hi + 1 + b)
            )
            if base + extra > budget:
                continue
            key = (extra, a + b, a)
            if key > best_key:
                best_key = key
                best = (a, b)
    return best


# --- quantiles -------------------------------------------------------------------

def nearest_rank(values: Sequence[float], q: float) -> float:
    ordered = sorted(values)
    return ordered[round(q * (len(ordered) - 1))]


# --- builders ---------------------------------------------------------------------

def chain_graph(profiles: Sequence[Tuple[int, int, int]]) -> ComputationGraph:
    """Straight chain; profiles are (flops, mem_bytes, out_bytes) per node."""
    nodes = [
        NodeProfile(i, "op", f, m, o) for i, (f, m, o) in enumerate(profiles)
    ]
    edges = [(i, i + 1) for i in range(len(nodes) - 1)]
    graph = ComputationGraph(
        nodes=nodes, edges=edges, topo_order=list(range(len(nodes)))
    )
    graph.validate()
    return graph


def skip_chain_graph(
    profiles: Sequence[Tuple[int, int, int]], skips: Sequence[Tuple[int, int]]
) -> ComputationGraph:
    """Chain plus extra forward edges."""
    nodes = [
        NodeProfile(i, "op", f, m, o) for i, (f, m, o) in enumerate(profiles)
    ]
    edges = [(i, i + 1) for i in range(len(nodes) - 1)] + list(skips)
    graph = ComputationGraph(
        nodes=nodes, edges=sorted(set(edges)), topo_order=list(range(len(nodes)))
    )
    graph.validate()
    return graph


def make_fleet(
    speeds: Sequence[float],
    mem_avail: Sequence[int],
    mem_total: Optional[Sequence[int]] = None,
    bandwidth: float = 50e6,
    latency: float = 0.001,
) -> FleetProfile:
    m = len(speeds)
    totals = list(mem_total) if mem_total else [int(v * 1.25) for v in mem_avail]
    devices = [
        DeviceProfile(i, speeds[i], totals[i], mem_avail[i]) for i in range(m)
    ]
    fleet = FleetProfile(
        devices=devices,
        bandwidth=[
            [0.0 if i == j else bandwidth for j in range(m)] for i in range(m)
        ],
        latency=[
            [0.0 if i == j else latency for j in range(m)] for i in range(m)
        ],
    )
    fleet.validate()
    return fleet


def make_cost_model(
    exec_time: Sequence[Sequence[float]],
    module_traffic: Sequence[Sequence[int]],
    mem_mod: Sequence[int],
    mem_avail: Sequence[int],
    bandwidth: float = 1e6,
    latency: float = 0.01,
    beta: float = 1.0,
    return_bytes: int = 0,
) -> CostModel:
    m = len(exec_time)
    return CostModel(
        exec_time=[list(r) for r in exec_time],
        module_traffic=[list(r) for r in module_traffic],
        mem_mod=list(mem_mod),
        flops_mod=[int(t * 1e9) for t in exec_time[0]],
        latency=[
            [0.0 if i == j else latency for j in range(m)] for i in range(m)
        ],
        bandwidth=[
            [0.0 if i == j else bandwidth for j in range(m)] for i in range(m)
        ],
        mem_avail=list(mem_avail),
        beta=beta,
        return_bytes=return_bytes,
    )


# --- run-report checks --------------------------------------------------------------

def ring_violations(report) -> List[str]:
    """Every activation's device path must follow ring order exactly once,
    and exactly one logits delivery must reach the ring head per token."""
    from pipelink.runtime import MsgType

    order = report.device_order
    succ = {
        order[i]: order[(i + 1) % len(order)] for i in range(len(order))
    }
    problems: List[str] = []
    acts: Dict[Tuple[int, int], List] = {}
    logits_count: Dict[Tuple[int, int], int] = {}
    for hop in report.hop_log:
        key = (hop.sample, hop.token)
        if hop.kind == int(MsgType.ACTIVATION):
            acts.setdefault(key, []).append(hop)
        elif hop.kind == int(MsgType.LOGITS):
            logits_count[key] = logits_count.get(key, 0) + 1
            if hop.dst != order[0]:
                problems.append(f"{key}: logits delivered to {hop.dst}")
    for key, hops in acts.items():
        hops.sort(key=lambda h: h.t_send)
        seen = set()
        for hop in hops:
            if succ[hop.src] != hop.dst:
                problems.append(
                    f"{key}: activation {hop.src}->{hop.dst} leaves the ring"
                )
            if (hop.src, hop.dst) in seen:
                problems.append(
                    f"{key}: activation repeats hop {hop.src}->{hop.dst}"
                )
            seen.add((hop.src, hop.dst))
    if len(order) > 1:
        for key in acts:
            if logits_count.get(key, 0) != 1:
                problems.append(
                    f"{key}: {logits_count.get(key, 0)} logits deliveries"
                )
    return problems


def shaped_bound_violations(report, fleet: FleetProfile) -> List[str]:
    """Measured per-hop time may never undercut the link's shaped time."""
    problems = []
    scale = report.time_scale if report.time_scale > 0 else 1.0
    for hop in report.hop_log:
        if hop.src == hop.dst:
            continue
        shaped = (
            fleet.latency[hop.src][hop.dst]
            + hop.sim_bytes / fleet.bandwidth[hop.src][hop.dst]
        )
        measured = hop.wall_seconds / scale
        if measured < shaped - 1e-9 and not math.isclose(measured, shaped):
            problems.append(
                f"hop {hop.src}->{hop.dst} kind {hop.kind} took {measured:.6f}s "
                f"simulated, under the shaped floor {shaped:.6f}s"
            )
    return problems
