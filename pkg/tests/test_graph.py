import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolplan.errors import GraphFormatError
from toolplan.graph import (
    PathSamplerConfig,
    load_graph,
    dump_graph,
    sample_path,
    sample_paths,
    validate_trajectory,
)

from conftest import make_graph


def graph_json(tools, edges):
    return json.dumps(
        {
            "tools": [{"name": n, "description": d} for n, d in tools],
            "edges": edges,
        }
    )


class TestLoadGraph:
    def test_minimal_two_tool_graph(self):
        g = load_graph(graph_json([("A", "first"), ("B", "second")], [["A", "B"]]))
        assert g.num_tools == 2
        assert len(g.edges) == 1
        assert g.has_edge(0, 1) and not g.has_edge(1, 0)

    def test_hf_scale_fixture(self, hf_graph):
        assert hf_graph.num_tools == 23
        assert len(hf_graph.edges) == 225

    def test_edge_to_undeclared_tool(self):
        src = graph_json([("A", "first")], [["A", "X"]])
        with pytest.raises(GraphFormatError, match="unknown tool 'X'"):
            load_graph(src)

    def test_malformed_json(self):
        with pytest.raises(GraphFormatError, match="not valid JSON"):
            load_graph("{nope")

    def test_missing_description(self):
        with pytest.raises(GraphFormatError, match="tools\\[0\\]"):
            load_graph(json.dumps({"tools": [{"name": "A"}], "edges": []}))

    def test_empty_description_rejected(self):
        with pytest.raises(GraphFormatError, match="empty description"):
            load_graph(graph_json([("A", "")], []))

    def test_duplicate_names_rejected(self):
        with pytest.raises(GraphFormatError, match="duplicate"):
            load_graph(graph_json([("A", "x"), ("A", "y")], []))

    def test_dump_round_trip(self, hf_graph):
        again = load_graph(dump_graph(hf_graph))
        assert again.edges == hf_graph.edges
        assert [t.name for t in again.tools] == [t.name for t in hf_graph.tools]


class TestSuccessors:
    def test_fan_out(self):
        g = make_graph(["A", "B", "C"], [("A", "B"), ("A", "C")])
        assert set(g.successors(0)) == {1, 2}

    def test_sink_is_empty(self):
        g = make_graph(["A", "B"], [("A", "B")])
        assert g.successors(1) == ()

    def test_fixture_out_degrees_sum_to_edge_count(self, hf_graph):
        total = sum(len(hf_graph.successors(i)) for i in range(hf_graph.num_tools))
        assert total == 225

    def test_invalid_id(self, chain_graph):
        with pytest.raises(IndexError):
            chain_graph.successors(99)

    def test_edge_consistency_with_validate(self, chain_graph):
        # j in successors(i) iff [i, j] is a legal trajectory
        m = chain_graph.num_tools
        for i in range(m):
            for j in range(m):
                expected = j in chain_graph.successors(i)
                assert validate_trajectory(chain_graph, [i, j]) is expected


class TestValidateTrajectory:
    def test_legal_chain(self, chain_graph):
        assert validate_trajectory(chain_graph, [0, 1, 2]) is True

    def test_reverse_edge_is_illegal(self):
        g = make_graph(["A", "B"], [("A", "B")])
        assert validate_trajectory(g, [1, 0]) is False

    def test_single_tool_is_vacuously_legal(self, chain_graph):
        assert validate_trajectory(chain_graph, [0]) is True

    def test_empty_rejected(self, chain_graph):
        with pytest.raises(ValueError):
            validate_trajectory(chain_graph, [])


class TestSamplePath:
    def test_isolated_node_truncates_to_length_one(self):
        g = make_graph(["A"], [])
        cfg = PathSamplerConfig(r_max=5, length_distribution=(0, 0, 0, 0, 1.0))
        p = sample_path(g, cfg, random.Random(0))
        assert p.nodes == (0,) and p.length == 1

    def test_two_cycle_walks_match_enumeration(self):
        g = make_graph(["A", "B"], [("A", "B"), ("B", "A")])
        cfg = PathSamplerConfig(r_max=4, length_distribution=(0, 0, 0, 1.0))
        legal = {(0, 1, 0, 1), (1, 0, 1, 0)}  # all legal length-4 walks
        rng = random.Random(5)
        for _ in range(20):
            assert sample_path(g, cfg, rng).nodes in legal

    def test_fixture_paths_are_always_legal(self, hf_graph):
        dist = (0.15, 0.2, 0.2, 0.15, 0.1, 0.08, 0.07, 0.05)
        cfg = PathSamplerConfig(r_max=8, length_distribution=dist, seed=3)
        for p in sample_paths(hf_graph, cfg, 2000):
            assert 1 <= p.length <= 8
            assert validate_trajectory(hf_graph, p.nodes)

    def test_determinism(self, hf_graph):
        cfg = PathSamplerConfig(r_max=4, length_distribution=(0.25,) * 4, seed=42)
        a = sample_paths(hf_graph, cfg, 200)
        b = sample_paths(hf_graph, cfg, 200)
        assert a == b

    def test_truncation_at_sinks(self):
        g = make_graph(["A", "B"], [("A", "B")])
        cfg = PathSamplerConfig(r_max=6, length_distribution=(0, 0, 0, 0, 0, 1.0))
        rng = random.Random(1)
        for _ in range(20):
            p = sample_path(g, cfg, rng)
            assert p.length <= 2
            assert validate_trajectory(g, p.nodes)


class TestPathSamplerConfig:
    def test_distribution_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sums to"):
            PathSamplerConfig(r_max=2, length_distribution=(0.5, 0.2))

    def test_r_max_positive(self):
        with pytest.raises(ValueError, match="r_max"):
            PathSamplerConfig(r_max=0, length_distribution=())

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="entries"):
            PathSamplerConfig(r_max=3, length_distribution=(1.0,))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_sampled_paths_always_legal_property(seed, n):
    g = make_graph(
        ["A", "B", "C", "D"],
        [("A", "B"), ("B", "C"), ("C", "A"), ("C", "D")],
    )
    cfg = PathSamplerConfig(r_max=5, length_distribution=(0.2,) * 5, seed=seed)
    for p in sample_paths(g, cfg, n):
        assert validate_trajectory(g, p.nodes)
        assert 1 <= p.length <= 5
