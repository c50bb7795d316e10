import json
from pathlib import Path

import pytest
import torch

from toolplan.graph import ToolGraph, ToolSpec, load_graph

torch.set_num_threads(1)

FIXTURES = Path(__file__).parent / "fixtures"


def make_graph(names, edges, descriptions=None):
    """Small graph builder; edges are (src_name, dst_name) pairs."""
    tools = [
        ToolSpec(id=i, name=n, description=(descriptions or {}).get(n, f"does {n.lower()} work"))
        for i, n in enumerate(names)
    ]
    idx = {n: i for i, n in enumerate(names)}
    return ToolGraph(tools, {(idx[a], idx[b]) for a, b in edges})


@pytest.fixture(scope="session")
def hf_graph():
    """Committed 23-tool / 225-edge fixture at HuggingFace scale."""
    return load_graph((FIXTURES / "graph_hf_scale.json").read_text())


@pytest.fixture(scope="session")
def ref():
    """Shared small reference setup (8 tools, 2 layers, hidden 32)."""
    from toolplan.gradcheck import reference_setup

    return reference_setup(seed=7)


@pytest.fixture()
def chain_graph():
    """A -> B -> C -> D plus A -> C."""
    return make_graph(
        ["A", "B", "C", "D"],
        [("A", "B"), ("B", "C"), ("C", "D"), ("A", "C")],
    )


def load_metrics_fixture():
    return json.loads((FIXTURES / "metrics_fixture.json").read_text())
