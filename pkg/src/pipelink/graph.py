"""Profiled computation graphs and their partitioning into pipeline sub-modules.

A model is a single-source, single-sink DAG of profiled nodes. Split points
are nodes where a residual branch forks off (out-degree > 1) while the node
itself consumes a single input (in-degree == 1). Cutting the topological
order immediately before each split point yields contiguous sub-modules;
edges that cross sub-module boundaries are classified as sequential (to the
next sub-module) or residual (skipping at least one sub-module ahead).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Set, Tuple


class GraphError(ValueError):
    """Invalid graph structure, partition, or graph file."""


@dataclass(frozen=True)
class NodeProfile:
    """One profiled operator: cost, weight footprint, and output size."""

    node_id: int
    kind: str
    flops: int
    mem_bytes: int
    out_bytes: int


@dataclass
class ComputationGraph:
    nodes: List[NodeProfile]
    edges: List[Tuple[int, int]]
    topo_order: List[int]

    def __post_init__(self):
        self._by_id = {n.node_id: n for n in self.nodes}
        self._pos = {v: i for i, v in enumerate(self.topo_order)}

    def node(self, node_id: int) -> NodeProfile:
        return self._by_id[node_id]

    def topo_pos(self, node_id: int) -> int:
        return self._pos[node_id]

    def in_degree(self) -> Dict[int, int]:
        deg = {n.node_id: 0 for n in self.nodes}
        for _, dst in self.edges:
            deg[dst] += 1
        return deg

    def out_degree(self) -> Dict[int, int]:
        deg = {n.node_id: 0 for n in self.nodes}
        for src, _ in self.edges:
            deg[src] += 1
        return deg

    @property
    def source(self) -> int:
        return self.topo_order[0]

    @property
    def sink(self) -> int:
        return self.topo_order[-1]

    def validate(self) -> None:
        """Check structural invariants; raises GraphError naming the offender."""
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted(i for i in set(ids) if ids.count(i) > 1)
            raise GraphError(f"duplicate node ids: {dup}")
        if sorted(self.topo_order) != sorted(ids):
            raise GraphError("topo_order is not a permutation of the node ids")
        for n in self.nodes:
            if n.flops < 0 or n.mem_bytes < 0 or n.out_bytes < 0:
                raise GraphError(f"node {n.node_id} has a negative profile field")
        seen = set()
        for src, dst in self.edges:
            if src not in self._by_id or dst not in self._by_id:
                raise GraphError(f"edge {src}->{dst} references a missing node")
            if src == dst:
                raise GraphError(f"self edge {src}->{dst}")
            if (src, dst) in seen:
                raise GraphError(f"duplicate edge {src}->{dst}")
            seen.add((src, dst))
            if self._pos[src] >= self._pos[dst]:
                raise GraphError(
                    f"edge {src}->{dst} goes backward in topological order "
                    f"(cycle through {src} and {dst}, or misordered ids)"
                )
        indeg = self.in_degree()
        outdeg = self.out_degree()
        sources = [v for v, d in indeg.items() if d == 0]
        sinks = [v for v, d in outdeg.items() if d == 0]
        if len(sources) != 1:
            raise GraphError(f"expected exactly one source, found {sorted(sources)}")
        if len(sinks) != 1:
            raise GraphError(f"expected exactly one sink, found {sorted(sinks)}")


@dataclass(frozen=True)
class SequentialDep:
    """Cross-boundary edge into the immediately following sub-module."""

    producer_subgraph: int
    producer_node: int
    consumer_subgraph: int
    consumer_node: int


@dataclass(frozen=True)
class ResidualDep:
    """Cross-boundary edge that skips at least one sub-module."""

    producer_subgraph: int
    producer_node: int
    consumer_subgraph: int
    consumer_node: int


@dataclass
class PartitionPlan:
    """Ordered contiguous sub-modules plus the classified cross edges."""

    subgraphs: List[List[int]]
    sdm: Set[SequentialDep] = field(default_factory=set)
    rdm: Set[ResidualDep] = field(default_factory=set)

    @property
    def num_subgraphs(self) -> int:
        return len(self.subgraphs)

    def subgraph_of(self) -> Dict[int, int]:
        owner = {}
        for idx, nodes in enumerate(self.subgraphs):
            for v in nodes:
                owner[v] = idx
        return owner


@dataclass(frozen=True)
class SubModuleProfile:
    """Aggregated cost/footprint of one sub-module and its outbound traffic.

    out_to maps a strictly later sub-module index to the bytes this
    sub-module ships there; a producer node is counted once per consuming
    sub-module even when several of its edges land in that sub-module.
    """

    index: int
    flops: int
    mem_bytes: int
    out_to: Dict[int, int]


def find_candidates(graph: ComputationGraph) -> List[int]:
    """Nodes with out-degree > 1 and in-degree == 1, in topological order."""
    indeg = graph.in_degree()
    outdeg = graph.out_degree()
    picked = [
        v for v in graph.topo_order if outdeg[v] > 1 and indeg[v] == 1
    ]
    return picked


def partition(graph: ComputationGraph, candidates: Sequence[int]) -> PartitionPlan:
    """Cut the topological order immediately before each candidate node.

    The first sub-module starts at the source; each candidate starts a new
    one. Candidates must be existing nodes, strictly ordered by topological
    position, and none may coincide with the source (that would leave an
    empty first sub-module).
    """
    graph.validate()
    positions = []
    for c in candidates:
        if c not in graph._by_id:
            raise GraphError(f"candidate {c} is not a node of the graph")
        positions.append(graph.topo_pos(c))
    for a, b in zip(positions, positions[1:]):
        if b <= a:
            raise GraphError(
                "candidates must be strictly increasing in topological order"
            )
    if positions and positions[0] == 0:
        raise GraphError(
            f"candidate {candidates[0]} is the source; first sub-module would be empty"
        )
    bounds = [0] + positions + [len(graph.topo_order)]
    subgraphs = [
        list(graph.topo_order[a:b]) for a, b in zip(bounds, bounds[1:])
    ]
    plan = PartitionPlan(subgraphs=subgraphs)
    sdm, rdm = dependency_search(graph, plan)
    plan.sdm = sdm
    plan.rdm = rdm
    return plan


def dependency_search(
    graph: ComputationGraph, plan: PartitionPlan
) -> Tuple[Set[SequentialDep], Set[ResidualDep]]:
    """Classify every cross-boundary edge of `plan` as sequential or residual.

    Edges inside one sub-module are ignored; an edge from a later sub-module
    back into an earlier one means the partition is malformed.
    """
    owner = plan.subgraph_of()
    sdm: Set[SequentialDep] = set()
    rdm: Set[ResidualDep] = set()
    for src, dst in graph.edges:
        i, j = owner[src], owner[dst]
        if i == j:
            continue
        if j < i:
            raise GraphError(
                f"edge {src}->{dst} crosses backward from sub-module {i} to {j}"
            )
        if j == i + 1:
            sdm.add(SequentialDep(i, src, j, dst))
        else:
            rdm.add(ResidualDep(i, src, j, dst))
    return sdm, rdm


def profile_submodules(
    graph: ComputationGraph, plan: PartitionPlan
) -> List[SubModuleProfile]:
    """Aggregate node profiles per sub-module and tally cross-boundary bytes."""
    owner = plan.subgraph_of()
    out_sets: List[Dict[int, Set[int]]] = [dict() for _ in plan.subgraphs]
    for src, dst in graph.edges:
        i, j = owner[src], owner[dst]
        if i == j:
            continue
        out_sets[i].setdefault(j, set()).add(src)
    profiles = []
    for idx, nodes in enumerate(plan.subgraphs):
        flops = sum(graph.node(v).flops for v in nodes)
        mem = sum(graph.node(v).mem_bytes for v in nodes)
        out_to = {
            j: sum(graph.node(u).out_bytes for u in sorted(producers))
            for j, producers in sorted(out_sets[idx].items())
        }
        profiles.append(
            SubModuleProfile(index=idx, flops=flops, mem_bytes=mem, out_to=out_to)
        )
    return profiles


def traffic_matrix(profiles: Sequence[SubModuleProfile]) -> List[List[int]]:
    """n x n bytes matrix between sub-modules; strictly upper triangular."""
    n = len(profiles)
    mat = [[0] * n for _ in range(n)]
    for p in profiles:
        for j, size in p.out_to.items():
            mat[p.index][j] = size
    return mat


def module_residual_pairs(plan: PartitionPlan) -> List[Tuple[int, int]]:
    """Distinct (producer, consumer) sub-module pairs joined by residual edges."""
    pairs = {(d.producer_subgraph, d.consumer_subgraph) for d in plan.rdm}
    return sorted(pairs)


# --- generators -----------------------------------------------------------

def generate_decoder_graph(
    num_blocks: int, hidden: int, seed: int = 0, cross_skips: bool = True
) -> ComputationGraph:
    """Synthetic decoder-style graph with one residual split per block.

    Per block: a norm node that fans out (residual split, out-degree 2) into
    an attention/mlp chain and directly into the block's merge node. Every
    third block additionally skips two blocks ahead (merge to merge), so
    partitions of three or more blocks carry residual cross-traffic;
    cross_skips=False suppresses those long edges and leaves a pure block
    chain.

    Profile closed forms, with h = hidden and a deterministic per-block
    jitter factor eta in [0.95, 1.05] drawn from `seed`:
      embed: flops 2h,          mem 512h,  out 4h
      norm:  flops 5h,          mem 8h,    out 4h
      attn:  flops 8h^2 * eta,  mem 16h^2, out 4h
      mlp:   flops 16h^2 * eta, mem 32h^2, out 4h
      merge: flops h,           mem 0,     out 4h
      head:  flops 8h^2,        mem 16h^2, out 2h
    """
    if num_blocks < 1:
        raise GraphError("num_blocks must be >= 1")
    if hidden < 1:
        raise GraphError("hidden must be >= 1")
    rng = random.Random(seed)
    h = hidden
    nodes: List[NodeProfile] = []
    edges: List[Tuple[int, int]] = []

    def add(kind, flops, mem, out):
        nid = len(nodes)
        nodes.append(NodeProfile(nid, kind, int(flops), int(mem), int(out)))
        return nid

    embed = add("embed", 2 * h, 512 * h, 4 * h)
    prev = embed
    merges = []
    for _ in range(num_blocks):
        eta = 1.0 + 0.1 * (rng.random() - 0.5)
        split = add("norm", 5 * h, 8 * h, 4 * h)
        attn = add("attn", 8 * h * h * eta, 16 * h * h, 4 * h)
        mlp = add("mlp", 16 * h * h * eta, 32 * h * h, 4 * h)
        merge = add("merge", h, 0, 4 * h)
        edges.append((prev, split))
        edges.append((split, attn))
        edges.append((split, merge))
        edges.append((attn, mlp))
        edges.append((mlp, merge))
        merges.append(merge)
        prev = merge
    head = add("head", 8 * h * h, 16 * h * h, 2 * h)
    edges.append((prev, head))
    if cross_skips:
        for b in range(0, num_blocks - 2, 3):
            edges.append((merges[b], merges[b + 2]))
    graph = ComputationGraph(nodes=nodes, edges=edges, topo_order=list(range(len(nodes))))
    graph.validate()
    return graph


def random_layered_graph(
    num_nodes: int,
    seed: int = 0,
    extra_edge_rate: float = 0.5,
    max_flops: int = 10**9,
    max_mem: int = 10**8,
    max_out: int = 10**6,
) -> ComputationGraph:
    """Random single-source single-sink DAG with ids already in topo order.

    Used by randomized test suites and the experiment scripts; structure is
    arbitrary (fan-outs, skips) but always satisfies the graph invariants.
    """
    if num_nodes < 2:
        raise GraphError("need at least source and sink")
    rng = random.Random(seed)
    n = num_nodes
    edge_set = set()
    for v in range(1, n):
        edge_set.add((rng.randrange(0, v), v))
    for u in range(0, n - 1):
        if not any(e[0] == u for e in edge_set):
            edge_set.add((u, rng.randrange(u + 1, n)))
    extras = int(extra_edge_rate * n)
    for _ in range(extras):
        u = rng.randrange(0, n - 1)
        v = rng.randrange(u + 1, n)
        if v == n - 1 and u == 0 and n > 2:
            continue
        edge_set.add((u, v))
    # nothing may flow into the source or out of the sink by construction
    nodes = [
        NodeProfile(
            v,
            "op",
            rng.randrange(1, max_flops),
            rng.randrange(0, max_mem),
            rng.randrange(1, max_out),
        )
        for v in range(n)
    ]
    graph = ComputationGraph(
        nodes=nodes, edges=sorted(edge_set), topo_order=list(range(n))
    )
    graph.validate()
    return graph


# --- text format ----------------------------------------------------------

def save_graph(graph: ComputationGraph, path: str) -> None:
    """Write the documented text format; ids must be 0..n-1 in topo order."""
    graph.validate()
    n = len(graph.nodes)
    if graph.topo_order != list(range(n)):
        raise GraphError("save_graph requires node ids 0..n-1 in topological order")
    lines = [f"graph v1 {n} {len(graph.edges)}"]
    for v in graph.topo_order:
        p = graph.node(v)
        lines.append(f"node {p.node_id} {p.kind} {p.flops} {p.mem_bytes} {p.out_bytes}")
    for src, dst in graph.edges:
        lines.append(f"edge {src} {dst}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path: str) -> ComputationGraph:
    """Parse the text format; errors carry the offending line number."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise GraphError(f"{path}: empty graph file")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 4 or parts[0] != "graph" or parts[1] != "v1":
        raise GraphError(f"{path}:{lineno}: expected 'graph v1 <nodes> <edges>'")
    try:
        n, e = int(parts[2]), int(parts[3])
    except ValueError:
        raise GraphError(f"{path}:{lineno}: non-integer node/edge count") from None
    nodes: List[NodeProfile] = []
    edges: List[Tuple[int, int]] = []
    for lineno, ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "node":
            if len(parts) != 6:
                raise GraphError(f"{path}:{lineno}: node line needs 5 fields")
            try:
                nid = int(parts[1])
                flops, mem, out = int(parts[3]), int(parts[4]), int(parts[5])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer node field") from None
            nodes.append(NodeProfile(nid, parts[2], flops, mem, out))
        elif parts[0] == "edge":
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: edge line needs 2 fields")
            try:
                edges.append((int(parts[1]), int(parts[2])))
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer edge endpoint") from None
        else:
            raise GraphError(f"{path}:{lineno}: unknown record '{parts[0]}'")
    if len(nodes) != n:
        raise GraphError(f"{path}: header declares {n} nodes, found {len(nodes)}")
    if len(edges) != e:
        raise GraphError(f"{path}: header declares {e} edges, found {len(edges)}")
    if [p.node_id for p in nodes] != list(range(n)):
        raise GraphError(f"{path}: node ids must be 0..{n - 1} in topological order")
    graph = ComputationGraph(nodes=nodes, edges=edges, topo_order=list(range(n)))
    try:
        graph.validate()
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from None
    return graph
