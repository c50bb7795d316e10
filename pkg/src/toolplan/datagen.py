"""Synthetic tool graphs and task corpora, plus corpus file I/O.

Corpus records are JSONL with fields ``id``, ``query``, ``subtasks``, and
``tool_sequence`` (tool names).  Queries and subtasks are assembled from the
versioned template asset so generated corpora are reproducible bit-exactly
per (graph, spec, seed).  The verbatim query style embeds tool names
directly and is the deliberately easy regime; paraphrase embeds only the
tool descriptions.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError
from .graph import DirectedPath, ToolGraph, ToolSpec, validate_trajectory

__all__ = [
    "TaskSample",
    "CorpusSpec",
    "DATAGEN_TEMPLATE_VERSION",
    "generate_synthetic_graph",
    "generate_task_corpus",
    "read_corpus",
    "write_corpus",
    "empirical_length_distribution",
    "template_texts",
]

_TEMPLATES = json.loads(
    resources.files("toolplan.assets").joinpath("datagen_templates.json").read_text("utf-8")
)
DATAGEN_TEMPLATE_VERSION: int = _TEMPLATES["version"]

_DESCRIPTION_PATTERNS = (
    ("verbs", "adjectives", "nouns"),
    ("verbs", "nouns", "prepositions", "nouns"),
    ("verbs", "adjectives", "nouns", "prepositions", "nouns"),
    ("verbs", "nouns", "prepositions", "adjectives", "nouns"),
    ("verbs", "adjectives", "nouns", "prepositions", "adjectives", "nouns"),
)


@dataclass(frozen=True)
class TaskSample:
    """One supervision unit: query, subtask decomposition, gold trajectory."""

    id: str
    query: str
    subtasks: tuple[str, ...]
    trajectory: tuple[int, ...]

    def __post_init__(self):
        if len(self.trajectory) < 1:
            raise DataError(f"sample {self.id!r}: trajectory must be non-empty")
        if len(self.subtasks) != len(self.trajectory):
            raise DataError(
                f"sample {self.id!r}: {len(self.subtasks)} subtasks but "
                f"{len(self.trajectory)} tools"
            )

    @property
    def length(self) -> int:
        return len(self.trajectory)


@dataclass(frozen=True)
class CorpusSpec:
    """Split sizes, trajectory-length distribution, and query style."""

    n_train: int
    n_val: int
    n_test: int
    length_distribution: tuple[float, ...]
    query_style: str = "verbatim"
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DataError("split sizes must be non-negative")
        total = sum(self.length_distribution)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"length_distribution sums to {total!r}, expected 1.0")
        if self.query_style not in ("verbatim", "paraphrase"):
            raise DataError(f"unknown query_style {self.query_style!r}")


def _make_description(rng: random.Random) -> str:
    pattern = _DESCRIPTION_PATTERNS[rng.randrange(len(_DESCRIPTION_PATTERNS))]
    return " ".join(rng.choice(_TEMPLATES[slot]) for slot in pattern)


def generate_synthetic_graph(n_tools: int, n_edges: int, seed: int) -> ToolGraph:
    """Random directed graph with unique tool metadata.

    A random spanning arborescence fragment is threaded first so the graph
    is weakly connected whenever ``n_edges >= n_tools - 1``; the remaining
    edges are drawn uniformly without replacement over ordered pairs.
    """
    if n_tools < 1:
        raise ConfigError(f"n_tools must be >= 1, got {n_tools}")
    if n_edges > n_tools * (n_tools - 1):
        raise ConfigError(
            f"n_edges {n_edges} exceeds maximum {n_tools * (n_tools - 1)} "
            f"for {n_tools} tools without self-loops"
        )
    rng = random.Random(seed)
    width = max(3, len(str(n_tools - 1)))
    seen: set[str] = set()
    tools = []
    for i in range(n_tools):
        desc = _make_description(rng)
        tries = 0
        while desc in seen:
            desc = _make_description(rng)
            tries += 1
            if tries > 1000:
                raise DataError("description lexicon exhausted; reduce n_tools")
        seen.add(desc)
        tools.append(ToolSpec(id=i, name=f"Tool_{i:0{width}d}", description=desc))

    order = list(range(n_tools))
    rng.shuffle(order)
    edges: set[tuple[int, int]] = set()
    for i in range(1, n_tools):
        if len(edges) >= n_edges:
            break
        parent = order[rng.randrange(i)]
        edges.add((parent, order[i]))
    if len(edges) < n_edges:
        pool = [
            (u, v)
            for u in range(n_tools)
            for v in range(n_tools)
            if u != v and (u, v) not in edges
        ]
        edges.update(rng.sample(pool, n_edges - len(edges)))
    return ToolGraph(tools, edges)


def _sample_exact_path(
    graph: ToolGraph, length: int, rng: random.Random, max_attempts: int = 200
) -> DirectedPath:
    for _ in range(max_attempts):
        node = rng.randrange(graph.num_tools)
        nodes = [node]
        while len(nodes) < length:
            succ = graph.successors(node)
            if not succ:
                break
            node = succ[rng.randrange(len(succ))]
            nodes.append(node)
        if len(nodes) == length:
            return DirectedPath(nodes=tuple(nodes))
    raise DataError(
        f"could not sample a legal path of length {length} after {max_attempts} "
        f"attempts; the graph (M={graph.num_tools}, |E|={len(graph.edges)}) may "
        f"not support that length"
    )


def _subtask_text(tool: ToolSpec) -> str:
    d = tool.description
    return d[0].upper() + d[1:] + "."


def _clause(tool: ToolSpec, style: str) -> str:
    if style == "verbatim":
        return _TEMPLATES["verbatim_clause"].format(name=tool.name)
    return _TEMPLATES["paraphrase_clause"].format(description=tool.description)


def _query_text(graph: ToolGraph, path: Sequence[int], style: str, rng: random.Random) -> str:
    parts = [_TEMPLATES["query_first_word"], " ", _clause(graph.tools[path[0]], style)]
    for t in path[1:]:
        parts.append(rng.choice(_TEMPLATES["connectives"]))
        parts.append(_clause(graph.tools[t], style))
    parts.append(_TEMPLATES["query_suffix"])
    return "".join(parts)


def generate_task_corpus(
    graph: ToolGraph, spec: CorpusSpec
) -> tuple[list[TaskSample], list[TaskSample], list[TaskSample]]:
    """Deterministic train/val/test splits of templated task samples.

    Every trajectory is an exact-length legal path, so sampled lengths match
    ``spec.length_distribution`` up to sampling noise.  Splits are disjoint
    by construction (sequential sample ids).
    """
    rng = random.Random(spec.seed)
    r_max = len(spec.length_distribution)
    total = spec.n_train + spec.n_val + spec.n_test
    samples: list[TaskSample] = []
    for i in range(total):
        length = rng.choices(range(1, r_max + 1), weights=spec.length_distribution)[0]
        path = _sample_exact_path(graph, length, rng)
        subtasks = tuple(_subtask_text(graph.tools[t]) for t in path.nodes)
        query = _query_text(graph, path.nodes, spec.query_style, rng)
        samples.append(
            TaskSample(id=f"s{i:06d}", query=query, subtasks=subtasks, trajectory=path.nodes)
        )
    train = samples[: spec.n_train]
    val = samples[spec.n_train : spec.n_train + spec.n_val]
    test = samples[spec.n_train + spec.n_val :]
    return train, val, test


def write_corpus(samples: Iterable[TaskSample], path: str | Path, graph: ToolGraph) -> None:
    """Write samples as JSONL; trajectories are serialized as tool names."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "id": s.id,
                "query": s.query,
                "subtasks": list(s.subtasks),
                "tool_sequence": [graph.name_of(t) for t in s.trajectory],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_corpus(path: str | Path, graph: ToolGraph) -> list[TaskSample]:
    """Read a JSONL corpus, resolving tool names and checking legality."""
    samples: list[TaskSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("id", "query", "subtasks", "tool_sequence"):
                if key not in rec:
                    raise DataError(f"{path}:{lineno}: record missing {key!r}")
            sid = str(rec["id"])
            tools = []
            for name in rec["tool_sequence"]:
                try:
                    tools.append(graph.id_of(name))
                except DataError:
                    raise DataError(
                        f"sample {sid!r}: unknown tool name {name!r}"
                    ) from None
            sample = TaskSample(
                id=sid,
                query=str(rec["query"]),
                subtasks=tuple(str(s) for s in rec["subtasks"]),
                trajectory=tuple(tools),
            )
            if not validate_trajectory(graph, sample.trajectory):
                raise DataError(f"sample {sid!r}: trajectory violates the tool graph")
            samples.append(sample)
    return samples


def empirical_length_distribution(samples: Sequence[TaskSample]) -> tuple[float, ...]:
    """Normalized histogram of trajectory lengths over 1..max."""
    if not samples:
        raise DataError("cannot estimate a length distribution from an empty corpus")
    longest = max(s.length for s in samples)
    counts = [0] * longest
    for s in samples:
        counts[s.length - 1] += 1
    n = len(samples)
    return tuple(c / n for c in counts)


def template_texts() -> tuple[str, ...]:
    """Fixed template words for lexicon construction."""
    fixed = [
        " ".join(_TEMPLATES["verbs"]),
        " ".join(_TEMPLATES["adjectives"]),
        " ".join(_TEMPLATES["nouns"]),
        " ".join(_TEMPLATES["prepositions"]),
        _TEMPLATES["verbatim_clause"].replace("{name}", ""),
        _TEMPLATES["paraphrase_clause"].replace("{description}", ""),
        _TEMPLATES["query_first_word"],
        "".join(_TEMPLATES["connectives"]),
        _TEMPLATES["query_suffix"],
    ]
    return tuple(fixed)
