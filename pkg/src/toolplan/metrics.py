"""Plan-quality metrics: EM, ELR, ACPL, Tool F1, NED, PA@K, hallucination.

All metrics are pure functions of prediction records; corpus aggregates are
plain means and therefore order-invariant.  Conventions fixed here:
predictions of length <= 1 are vacuously edge-legal (ELR 1.0), an empty
prediction scores F1 0 and NED 1, and hallucination counts come from the
decode step (eos excluded) rather than being recomputed from sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DataError
from .graph import ToolGraph

__all__ = [
    "PredictionRecord",
    "MetricsReport",
    "exact_match",
    "edge_legality_rate",
    "acpl",
    "tool_f1",
    "levenshtein",
    "ned",
    "prefix_accuracy_at_k",
    "hallucination_ratio",
    "evaluate_corpus",
]


@dataclass(frozen=True)
class PredictionRecord:
    """One evaluated sample: decoded prediction vs gold, plus decode counts."""

    sample_id: str
    pred: tuple[int, ...]
    gold: tuple[int, ...]
    hallucinated_token_count: int = 0
    generated_token_count: int = 0

    def __post_init__(self):
        if len(self.gold) == 0:
            raise DataError(f"record {self.sample_id!r}: gold trajectory is empty")
        if self.hallucinated_token_count < 0 or self.generated_token_count < 0:
            raise DataError(f"record {self.sample_id!r}: negative token counts")


def exact_match(pred: Sequence[int], gold: Sequence[int]) -> int:
    """1 iff the sequences are identical in content, order, and length."""
    return int(tuple(pred) == tuple(gold))


def edge_legality_rate(graph: ToolGraph, pred: Sequence[int]) -> float:
    """Fraction of consecutive predicted transitions that are graph edges.

    Predictions with fewer than two tools have no transitions and are
    vacuously legal (1.0).
    """
    if len(pred) <= 1:
        return 1.0
    legal = sum(
        1 for k in range(len(pred) - 1) if graph.has_edge(pred[k], pred[k + 1])
    )
    return legal / (len(pred) - 1)


def acpl(pred: Sequence[int], gold: Sequence[int]) -> int:
    """Number of correct positions before the first mismatch."""
    c = 0
    for p, g in zip(pred, gold):
        if p != g:
            break
        c += 1
    return c


def tool_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    """Set-level harmonic mean of tool precision and recall (order ignored)."""
    pset, gset = set(pred), set(gold)
    if not pset:
        return 0.0
    inter = len(pset & gset)
    if inter == 0:
        return 0.0
    precision = inter / len(pset)
    recall = inter / len(gset)
    return 2 * precision * recall / (precision + recall)


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Edit distance with unit insertion, deletion, and substitution costs."""
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[lb]


def ned(pred: Sequence[int], gold: Sequence[int]) -> float:
    """Levenshtein distance normalized by the longer sequence length."""
    if len(gold) == 0:
        raise DataError("gold trajectory must be non-empty")
    if len(pred) == 0:
        return 1.0
    return levenshtein(pred, gold) / max(len(pred), len(gold))


def prefix_accuracy_at_k(records: Sequence[PredictionRecord], k: int) -> float | None:
    """Fraction of samples with gold length >= k whose first k tools match.

    Returns None when no sample is long enough (empty denominator).
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    eligible = [r for r in records if len(r.gold) >= k]
    if not eligible:
        return None
    return sum(1 for r in eligible if acpl(r.pred, r.gold) >= k) / len(eligible)


def hallucination_ratio(records: Sequence[PredictionRecord]) -> float:
    """Hallucinated tool-position tokens over all generated ones; 0/0 -> 0."""
    generated = sum(r.generated_token_count for r in records)
    if generated == 0:
        return 0.0
    return sum(r.hallucinated_token_count for r in records) / generated


@dataclass
class MetricsReport:
    """Corpus-aggregate metrics plus the per-sample breakdown."""

    em: float
    elr: float
    acpl: float
    tool_f1: float
    ned: float
    pa_at_k: dict[int, float | None]
    hallucination_ratio: float
    n_samples: int
    per_sample: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "n_samples": self.n_samples,
            "em": self.em,
            "elr": self.elr,
            "acpl": self.acpl,
            "tool_f1": self.tool_f1,
            "ned": self.ned,
            "pa_at_k": {str(k): v for k, v in sorted(self.pa_at_k.items())},
            "hallucination_ratio": self.hallucination_ratio,
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_table(self) -> str:
        rows = [
            ("samples", f"{self.n_samples}"),
            ("EM", f"{self.em:.4f}"),
            ("ELR", f"{self.elr:.4f}"),
            ("ACPL", f"{self.acpl:.4f}"),
            ("Tool F1", f"{self.tool_f1:.4f}"),
            ("NED", f"{self.ned:.4f}"),
        ]
        for k, v in sorted(self.pa_at_k.items()):
            rows.append((f"PA@{k}", "-" if v is None else f"{v:.4f}"))
        rows.append(("halluc. ratio", f"{self.hallucination_ratio:.4f}"))
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {val}" for name, val in rows]
        return "\n".join(lines) + "\n"


def evaluate_corpus(
    graph: ToolGraph,
    records: Sequence[PredictionRecord],
    k_list: Sequence[int] = (1, 3),
) -> MetricsReport:
    """Every metric over a record list, with a per-sample breakdown."""
    if not records:
        raise DataError("cannot evaluate an empty record list")
    per_sample = []
    for r in records:
        per_sample.append(
            {
                "id": r.sample_id,
                "em": exact_match(r.pred, r.gold),
                "elr": edge_legality_rate(graph, r.pred),
                "acpl": acpl(r.pred, r.gold),
                "tool_f1": tool_f1(r.pred, r.gold),
                "ned": ned(r.pred, r.gold),
            }
        )
    n = len(records)
    return MetricsReport(
        em=sum(row["em"] for row in per_sample) / n,
        elr=sum(row["elr"] for row in per_sample) / n,
        acpl=sum(row["acpl"] for row in per_sample) / n,
        tool_f1=sum(row["tool_f1"] for row in per_sample) / n,
        ned=sum(row["ned"] for row in per_sample) / n,
        pa_at_k={k: prefix_accuracy_at_k(records, k) for k in k_list},
        hallucination_ratio=hallucination_ratio(records),
        n_samples=n,
        per_sample=per_sample,
    )
