"""Graph profiling, boundary detection, partitioning, and edge classification."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipelink import (
    GraphError,
    PartitionPlan,
    ResidualDep,
    SequentialDep,
    dependency_search,
    find_candidates,
    generate_decoder_graph,
    load_graph,
    partition,
    profile_submodules,
    random_layered_graph,
    save_graph,
    traffic_matrix,
)

from helpers import (
    chain_graph,
    classify_edges_by_gap,
    degree_scan_candidates,
    edge_walk_traffic,
    skip_chain_graph,
)


PROFILE3 = [(100, 10, 1000), (200, 20, 2000), (300, 30, 3000)]


class TestFindCandidates:
    def test_pure_chain_has_none(self):
        graph = chain_graph(PROFILE3)
        assert find_candidates(graph) == []

    def test_single_fanout_node(self):
        # 0 -> 1, 1 -> 2, 1 -> 3: node 1 has in-degree 1 and out-degree 2
        graph = skip_chain_graph(
            [(1, 1, 10), (1, 1, 10), (1, 1, 10), (1, 1, 10)], [(1, 3)]
        )
        assert find_candidates(graph) == [1]

    def test_decoder_graph_matches_degree_scan(self):
        graph = generate_decoder_graph(num_blocks=4, hidden=64, seed=3)
        assert find_candidates(graph) == degree_scan_candidates(graph)

    def test_source_fanout_is_not_a_candidate(self):
        # source has in-degree 0, so fan-out alone does not qualify
        graph = skip_chain_graph(
            [(1, 1, 10), (1, 1, 10), (1, 1, 10)], [(0, 2)]
        )
        assert find_candidates(graph) == []


class TestPartition:
    def test_no_candidates_single_subgraph(self):
        graph = chain_graph(PROFILE3)
        plan = partition(graph, [])
        assert plan.subgraphs == [[0, 1, 2]]
        assert plan.sdm == set() and plan.rdm == set()

    def test_single_boundary_cuts_before_candidate(self):
        graph = chain_graph(PROFILE3)
        plan = partition(graph, [1])
        assert plan.subgraphs == [[0], [1, 2]]

    def test_unknown_candidate_rejected(self):
        graph = chain_graph(PROFILE3)
        with pytest.raises(GraphError):
            partition(graph, [9])

    def test_non_increasing_candidates_rejected(self):
        graph = chain_graph([(1, 1, 1)] * 4)
        with pytest.raises(GraphError):
            partition(graph, [2, 1])

    def test_source_candidate_rejected(self):
        graph = chain_graph(PROFILE3)
        with pytest.raises(GraphError):
            partition(graph, [0])

    def test_decoder_partition_invariants(self):
        graph = generate_decoder_graph(num_blocks=5, hidden=32, seed=11)
        cands = find_candidates(graph)
        plan = partition(graph, cands)
        flat = [v for sub in plan.subgraphs for v in sub]
        assert sorted(flat) == sorted(graph.topo_order)
        assert len(flat) == len(set(flat))
        starts = {sub[0] for sub in plan.subgraphs}
        assert starts == {graph.source()} | set(cands)


class TestDependencySearch:
    def test_adjacent_only(self):
        graph = chain_graph(PROFILE3)
        plan = partition(graph, [1])
        assert plan.sdm == {SequentialDep(0, 0, 1, 1)}
        assert plan.rdm == set()

    def test_skip_edge_becomes_residual(self):
        graph = skip_chain_graph(PROFILE3, [(0, 2)])
        plan = partition(graph, [1, 2])
        assert plan.subgraphs == [[0], [1], [2]]
        assert plan.sdm == {SequentialDep(0, 0, 1, 1), SequentialDep(1, 1, 2, 2)}
        assert plan.rdm == {ResidualDep(0, 0, 2, 2)}

    def test_backward_cross_edge_rejected(self):
        graph = chain_graph([(1, 1, 1), (1, 1, 1)])
        malformed = PartitionPlan(subgraphs=[[1], [0]])
        with pytest.raises(GraphError):
            dependency_search(graph, malformed)

    def test_decoder_matches_edge_scan(self):
        graph = generate_decoder_graph(num_blocks=6, hidden=48, seed=5)
        plan = partition(graph, find_candidates(graph))
        _, seq, res = classify_edges_by_gap(graph, plan.subgraphs)
        assert {(d.producer_subgraph, d.producer_node,
                 d.consumer_subgraph, d.consumer_node) for d in plan.sdm} == seq
        assert {(d.producer_subgraph, d.producer_node,
                 d.consumer_subgraph, d.consumer_node) for d in plan.rdm} == res


class TestProfileSubmodules:
    def test_single_subgraph_totals(self):
        graph = chain_graph(PROFILE3)
        profiles = profile_submodules(graph, partition(graph, []))
        assert len(profiles) == 1
        assert profiles[0].flops == 600
        assert profiles[0].mem_bytes == 60
        assert profiles[0].out_to == {}

    def test_two_subgraph_boundary_bytes(self):
        graph = chain_graph([(1, 1, 1000), (1, 1, 500)])
        profiles = profile_submodules(graph, partition(graph, [1]))
        assert profiles[0].out_to == {1: 1000}
        assert profiles[1].out_to == {}

    def test_producer_counted_once_per_target(self):
        # node 1 feeds both nodes of the next sub-module; one tensor shipped
        graph = skip_chain_graph(
            [(1, 1, 100), (1, 1, 700), (1, 1, 100), (1, 1, 100)], [(1, 3)]
        )
        profiles = profile_submodules(graph, partition(graph, [2]))
        assert profiles[0].out_to == {1: 700 + 100}

    def test_decoder_matches_edge_walk(self):
        graph = generate_decoder_graph(num_blocks=6, hidden=40, seed=9)
        plan = partition(graph, find_candidates(graph))
        profiles = profile_submodules(graph, plan)
        expected = edge_walk_traffic(graph, plan.subgraphs)
        got = {
            (p.index, k): v for p in profiles for k, v in p.out_to.items()
        }
        assert got == expected

    def test_traffic_matrix_strictly_upper_triangular(self):
        graph = generate_decoder_graph(num_blocks=6, hidden=40, seed=9)
        plan = partition(graph, find_candidates(graph))
        mat = traffic_matrix(profile_submodules(graph, plan))
        for i, row in enumerate(mat):
            for j, v in enumerate(row):
                if j <= i:
                    assert v == 0


class TestGenerateDecoderGraph:
    def test_one_block_one_candidate(self):
        graph = generate_decoder_graph(num_blocks=1, hidden=16, seed=0)
        assert len(find_candidates(graph)) == 1

    def test_deterministic_for_seed(self):
        a = generate_decoder_graph(num_blocks=6, hidden=64, seed=7)
        b = generate_decoder_graph(num_blocks=6, hidden=64, seed=7)
        assert a.nodes == b.nodes and a.edges == b.edges

    def test_six_blocks_make_residual_deps(self):
        graph = generate_decoder_graph(num_blocks=6, hidden=64, seed=7)
        plan = partition(graph, find_candidates(graph))
        assert len(plan.rdm) >= 2


class TestGraphFile:
    def test_round_trip(self, tmp_path):
        graph = generate_decoder_graph(num_blocks=3, hidden=32, seed=1)
        path = str(tmp_path / "g.txt")
        save_graph(graph, path)
        loaded = load_graph(path)
        assert loaded.nodes == graph.nodes
        assert loaded.edges == graph.edges
        assert loaded.topo_order == graph.topo_order

    def test_cycle_rejected(self, tmp_path):
        path = tmp_path / "cyc.txt"
        path.write_text(
            "graph v1 2 2\n"
            "node 0 op 1 1 1\n"
            "node 1 op 1 1 1\n"
            "edge 0 1\n"
            "edge 1 0\n"
        )
        with pytest.raises(GraphError, match="cycle|backward"):
            load_graph(str(path))

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "dup.txt"
        path.write_text(
            "graph v1 2 1\n"
            "node 0 op 1 1 1\n"
            "node 0 op 1 1 1\n"
            "edge 0 1\n"
        )
        with pytest.raises(GraphError, match="0"):
            load_graph(str(path))

    def test_header_line_required(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("nodes 2\n")
        with pytest.raises(GraphError):
            load_graph(str(path))


# --- randomized invariants ---------------------------------------------------


def random_plan(seed: int, take_every: int):
    graph = random_layered_graph(num_nodes=30, seed=seed)
    cands = find_candidates(graph)[::take_every] if take_every else []
    return graph, partition(graph, cands)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), take=st.integers(1, 3))
def test_edge_partition_property(seed, take):
    graph, plan = random_plan(seed, take)
    intra, seq, res = classify_edges_by_gap(graph, plan.subgraphs)
    assert len(intra) + len(plan.sdm) + len(plan.rdm) == len(graph.edges)
    assert len(plan.sdm) == len(seq) and len(plan.rdm) == len(res)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), take=st.integers(1, 3))
def test_boundary_property(seed, take):
    graph, plan = random_plan(seed, take)
    allowed = {graph.source()} | set(find_candidates(graph))
    for sub in plan.subgraphs:
        assert sub[0] in allowed


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), take=st.integers(1, 3))
def test_profile_conservation(seed, take):
    graph, plan = random_plan(seed, take)
    profiles = profile_submodules(graph, plan)
    assert sum(p.flops for p in profiles) == sum(n.flops for n in graph.nodes)
    assert sum(p.mem_bytes for p in profiles) == sum(
        n.mem_bytes for n in graph.nodes
    )


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_partition_deterministic(seed):
    graph = random_layered_graph(num_nodes=24, seed=seed)
    cands = find_candidates(graph)
    a = partition(graph, cands)
    b = partition(graph, cands)
    assert a.subgraphs == b.subgraphs and a.sdm == b.sdm and a.rdm == b.rdm
