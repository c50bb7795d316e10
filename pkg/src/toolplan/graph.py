"""Directed tool graph: dependency queries, trajectory legality, path sampling.

A tool graph is a set of tools (dense integer ids) plus a set of directed
edges ``(src, dst)`` meaning ``dst`` may legally follow ``src`` in an
execution plan.  Edge membership is exact: ``(a, b)`` in the edge set says
nothing about ``(b, a)``.

Everything here is immutable after construction and pure given an explicit
``random.Random`` stream, so instances can be shared freely across threads.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .errors import GraphFormatError

__all__ = [
    "ToolSpec",
    "ToolGraph",
    "DirectedPath",
    "PathSamplerConfig",
    "load_graph",
    "dump_graph",
    "validate_trajectory",
    "sample_path",
    "sample_paths",
]


@dataclass(frozen=True)
class ToolSpec:
    """One executable tool: dense id, unique name, free-text description."""

    id: int
    name: str
    description: str


class ToolGraph:
    """Immutable directed graph over a dense tool set."""

    def __init__(self, tools: list[ToolSpec], edges: set[tuple[int, int]]):
        self.tools: tuple[ToolSpec, ...] = tuple(tools)
        m = len(self.tools)
        ids = [t.id for t in self.tools]
        if ids != list(range(m)):
            raise GraphFormatError("tool ids must be dense and in order 0..M-1")
        names = [t.name for t in self.tools]
        if len(set(names)) != m:
            dup = sorted({n for n in names if names.count(n) > 1})
            raise GraphFormatError(f"duplicate tool names: {dup}")
        for t in self.tools:
            if not t.description:
                raise GraphFormatError(f"tool {t.name!r} has an empty description")
        for (u, v) in edges:
            if not (0 <= u < m and 0 <= v < m):
                raise GraphFormatError(f"edge ({u}, {v}) references an unknown tool id")
        self.edges: frozenset[tuple[int, int]] = frozenset(edges)
        succ: list[list[int]] = [[] for _ in range(m)]
        pred: list[list[int]] = [[] for _ in range(m)]
        for (u, v) in sorted(self.edges):
            succ[u].append(v)
            pred[v].append(u)
        self._succ = tuple(tuple(s) for s in succ)
        self._pred = tuple(tuple(p) for p in pred)
        self._name_to_id = {t.name: t.id for t in self.tools}

    @property
    def num_tools(self) -> int:
        return len(self.tools)

    def successors(self, tool: int) -> tuple[int, ...]:
        """All ids j with (tool, j) in the edge set, ascending; may be empty."""
        self._check_id(tool)
        return self._succ[tool]

    def predecessors(self, tool: int) -> tuple[int, ...]:
        self._check_id(tool)
        return self._pred[tool]

    def has_edge(self, src: int, dst: int) -> bool:
        return (src, dst) in self.edges

    def id_of(self, name: str) -> int:
        try:
            return self._name_to_id[name]
        except KeyError:
            raise GraphFormatError(f"unknown tool name {name!r}") from None

    def name_of(self, tool: int) -> str:
        self._check_id(tool)
        return self.tools[tool].name

    def _check_id(self, tool: int) -> None:
        if not (0 <= tool < self.num_tools):
            raise IndexError(f"tool id {tool} out of range [0, {self.num_tools})")

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"ToolGraph(M={self.num_tools}, |E|={len(self.edges)})"


@dataclass(frozen=True)
class DirectedPath:
    """A walk through the graph; every consecutive pair is an edge."""

    nodes: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class PathSamplerConfig:
    """Target-length distribution and cap for directed-path sampling.

    ``length_distribution[k]`` is the probability of target length ``k+1``;
    the vector spans lengths ``1..r_max`` and must sum to 1 within 1e-9.
    """

    r_max: int
    length_distribution: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.r_max < 1:
            raise ValueError(f"r_max must be >= 1, got {self.r_max}")
        if len(self.length_distribution) != self.r_max:
            raise ValueError(
                f"length_distribution has {len(self.length_distribution)} entries, "
                f"expected r_max={self.r_max}"
            )
        total = sum(self.length_distribution)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"length_distribution sums to {total!r}, expected 1.0")
        if any(p < 0 for p in self.length_distribution):
            raise ValueError("length_distribution entries must be non-negative")


def load_graph(source: str) -> ToolGraph:
    """Parse a graph file's content (UTF-8 JSON) into a ToolGraph.

    Schema: ``{"tools": [{"name": str, "description": str}, ...],
    "edges": [[src_name, dst_name], ...]}``.  Ids are assigned by list order.
    """
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"graph file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "tools" not in doc or "edges" not in doc:
        raise GraphFormatError("graph file must be an object with 'tools' and 'edges'")
    tools: list[ToolSpec] = []
    for i, rec in enumerate(doc["tools"]):
        if not isinstance(rec, dict) or "name" not in rec or "description" not in rec:
            raise GraphFormatError(f"tools[{i}] must have 'name' and 'description'")
        tools.append(ToolSpec(id=i, name=str(rec["name"]), description=str(rec["description"])))
    name_to_id = {}
    for t in tools:
        if t.name in name_to_id:
            raise GraphFormatError(f"duplicate tool name {t.name!r}")
        name_to_id[t.name] = t.id
    edges: set[tuple[int, int]] = set()
    for i, rec in enumerate(doc["edges"]):
        if not (isinstance(rec, (list, tuple)) and len(rec) == 2):
            raise GraphFormatError(f"edges[{i}] must be a [src_name, dst_name] pair")
        src, dst = rec
        if src not in name_to_id:
            raise GraphFormatError(f"edges[{i}] references unknown tool {src!r}")
        if dst not in name_to_id:
            raise GraphFormatError(f"edges[{i}] references unknown tool {dst!r}")
        edges.add((name_to_id[src], name_to_id[dst]))
    return ToolGraph(tools, edges)


def dump_graph(graph: ToolGraph) -> str:
    """Serialize a graph back to the canonical JSON file format."""
    doc = {
        "tools": [{"name": t.name, "description": t.description} for t in graph.tools],
        "edges": [
            [graph.name_of(u), graph.name_of(v)] for (u, v) in sorted(graph.edges)
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def validate_trajectory(graph: ToolGraph, seq: list[int] | tuple[int, ...]) -> bool:
    """True iff every consecutive pair of ``seq`` is a graph edge.

    Length-1 sequences are vacuously legal; empty sequences are rejected.
    """
    if len(seq) == 0:
        raise ValueError("trajectory must contain at least one tool")
    for t in seq:
        graph._check_id(t)
    return all(graph.has_edge(seq[k], seq[k + 1]) for k in range(len(seq) - 1))


def sample_path(graph: ToolGraph, config: PathSamplerConfig, rng: random.Random) -> DirectedPath:
    """Sample one directed path (a walk; node repeats allowed).

    The target length is drawn from ``config.length_distribution``, the start
    node uniformly over all tools, and each step uniformly over the current
    node's successors.  A walk that reaches a sink before the target length
    is truncated and returned as-is, which guarantees termination.
    """
    if graph.num_tools == 0:
        raise ValueError("cannot sample a path from an empty graph")
    target = rng.choices(range(1, config.r_max + 1), weights=config.length_distribution)[0]
    node = rng.randrange(graph.num_tools)
    nodes = [node]
    while len(nodes) < target:
        succ = graph.successors(node)
        if not succ:
            break
        node = succ[rng.randrange(len(succ))]
        nodes.append(node)
    return DirectedPath(nodes=tuple(nodes))


def sample_paths(graph: ToolGraph, config: PathSamplerConfig, n: int) -> list[DirectedPath]:
    """Sample ``n`` paths from a stream seeded with ``config.seed``."""
    rng = random.Random(config.seed)
    return [sample_path(graph, config, rng) for _ in range(n)]
