"""Training objectives: subtask grounding, edge reconstruction, SFT, and
on-policy distillation against a privileged frozen teacher.

Conventions shared by every loss here:
  * losses are scalar float64 tensors attached to the autograd graph;
  * randomness always flows through explicit rng arguments;
  * anything sampled (negative candidates, student rollouts) is drawn first
    and then treated as fixed data, so each loss is a deterministic function
    of the parameters given its draws (sampling is a stop-gradient).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .datagen import TaskSample
from .errors import ConfigError, DataError
from .graph import DirectedPath, ToolGraph
from .model import PolicyModel, forward_batch, generate_many
from .prompts import render_student_prompt, render_teacher_prompt
from .vocab import ToolVocabulary, encode_trajectory, restricted_output_ids

__all__ = [
    "EdgeObjectiveConfig",
    "EdgeProjections",
    "CandidateSet",
    "DistillationBatch",
    "subtask_grounding_loss",
    "build_candidate_set",
    "build_candidate_sets_for_path",
    "edge_scores",
    "edge_reconstruction_loss",
    "edge_loss_with_candidates",
    "sft_loss",
    "sft_loss_batch",
    "build_student_prompt",
    "build_teacher_prompt",
    "restricted_distribution",
    "sample_rollout",
    "make_distillation_batch",
    "opd_loss",
    "opd_loss_given_rollout",
    "opd_loss_batch",
    "combined_loss",
]

_LOG_SMOOTH = 1e-12
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class EdgeObjectiveConfig:
    """Negative sampling and scoring knobs for edge reconstruction."""

    neg_ratio: int = 10
    temperature: float = 0.1
    projection_dim: int = 32
    include_reverse_negatives: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.neg_ratio < 1:
            raise ConfigError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.projection_dim < 1:
            raise ConfigError(f"projection_dim must be >= 1, got {self.projection_dim}")


class EdgeProjections(nn.Module):
    """Trainable projections applied to hidden states and tool embeddings."""

    def __init__(self, hidden_dim: int, projection_dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        scale = hidden_dim ** -0.5
        self.w_h = nn.Parameter(
            torch.randn(projection_dim, hidden_dim, generator=g, dtype=torch.float64) * scale
        )
        self.w_e = nn.Parameter(
            torch.randn(projection_dim, hidden_dim, generator=g, dtype=torch.float64) * scale
        )

    def named_parameter_dict(self, prefix: str = "proj.") -> dict[str, Tensor]:
        return {prefix + name: p for name, p in self.named_parameters()}


@dataclass(frozen=True)
class CandidateSet:
    """Scoring candidates for one anchor tool.

    positives are the anchor's graph successors; reverse_negatives are
    predecessors that are not also successors; negatives are drawn uniformly
    without replacement from the remaining tools.
    """

    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    reverse_negatives: tuple[int, ...]

    def __post_init__(self):
        pos = set(self.positives)
        if pos & set(self.negatives) or pos & set(self.reverse_negatives):
            raise ConfigError("candidate set overlaps positives with negatives")

    @property
    def ordered_candidates(self) -> tuple[int, ...]:
        return self.positives + self.reverse_negatives + self.negatives


def build_candidate_set(
    graph: ToolGraph, anchor: int, config: EdgeObjectiveConfig, rng: random.Random
) -> CandidateSet:
    """Assemble the candidate set for an anchor.

    Up to ``neg_ratio * |positives|`` negatives are sampled from tools that
    are neither positives, reverse negatives, nor the anchor itself; when
    the pool is smaller the whole pool is used.
    """
    positives = graph.successors(anchor)
    if config.include_reverse_negatives:
        reverse = tuple(
            j for j in graph.predecessors(anchor) if not graph.has_edge(anchor, j)
        )
    else:
        reverse = ()
    excluded = set(positives) | set(reverse) | {anchor}
    pool = [t for t in range(graph.num_tools) if t not in excluded]
    want = min(config.neg_ratio * len(positives), len(pool))
    negatives = tuple(sorted(rng.sample(pool, want))) if want else ()
    return CandidateSet(
        anchor=anchor, positives=positives, negatives=negatives, reverse_negatives=reverse
    )


def build_candidate_sets_for_path(
    graph: ToolGraph, path: DirectedPath, config: EdgeObjectiveConfig, rng: random.Random
) -> list[tuple[int, CandidateSet]]:
    """Candidate sets for each path position whose tool has successors."""
    out = []
    for r, u in enumerate(path.nodes):
        if graph.successors(u):
            out.append((r, build_candidate_set(graph, u, config, rng)))
    return out


def edge_scores(
    h_r: Tensor,
    candidates: Sequence[int],
    tool_embeddings: Tensor,
    projections: EdgeProjections,
    gamma: float,
) -> Tensor:
    """Temperature-scaled cosine between projected hidden and tool embeddings.

    ``tool_embeddings`` is the [M, H] block of tool-token embedding rows
    indexed by tool id.  Either projected vector with norm below 1e-12
    yields score 0 for that pair.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    ph = projections.w_h @ h_r
    pe = tool_embeddings[list(candidates)] @ projections.w_e.T
    nh = ph.norm()
    ne = pe.norm(dim=1)
    valid = (nh >= _NORM_FLOOR) & (ne >= _NORM_FLOOR)
    denom = torch.where(valid, nh * ne, torch.ones_like(ne))
    cos = torch.where(valid, (pe @ ph) / denom, torch.zeros_like(ne))
    return cos / gamma


def _tool_embedding_block(model: PolicyModel, vocab: ToolVocabulary) -> Tensor:
    base = vocab.token_id_of_tool(0)
    return model.embed.weight[base : base + vocab.num_tools]


def edge_loss_with_candidates(
    model: PolicyModel,
    projections: EdgeProjections,
    vocab: ToolVocabulary,
    paths: Sequence[DirectedPath],
    candidate_sets: Sequence[Sequence[tuple[int, CandidateSet]]],
    gamma: float,
) -> Tensor | None:
    """Edge-reconstruction loss given pre-drawn candidate sets.

    Per position: softmax cross-entropy of each positive against the full
    candidate score vector, averaged over positives; then averaged over the
    positions with successors, then over paths.  Paths whose every tool is
    a sink contribute nothing; returns None when no path contributes.
    """
    used = [i for i, cands in enumerate(candidate_sets) if cands]
    if not used:
        return None
    tokens = [encode_trajectory(vocab, paths[i].nodes).token_ids for i in used]
    _, hiddens, _ = forward_batch(model, tokens)
    penultimate = hiddens[-2]
    tool_rows = _tool_embedding_block(model, vocab)
    path_losses = []
    for b, i in enumerate(used):
        position_losses = []
        for r, cs in candidate_sets[i]:
            scores = edge_scores(
                penultimate[b, r], cs.ordered_candidates, tool_rows, projections, gamma
            )
            logp = torch.log_softmax(scores, dim=0)
            position_losses.append(-logp[: len(cs.positives)].mean())
        path_losses.append(torch.stack(position_losses).mean())
    return torch.stack(path_losses).mean()


def edge_reconstruction_loss(
    model: PolicyModel,
    projections: EdgeProjections,
    vocab: ToolVocabulary,
    graph: ToolGraph,
    paths: DirectedPath | Sequence[DirectedPath],
    config: EdgeObjectiveConfig,
    rng: random.Random,
) -> Tensor | None:
    """Sample candidate sets then score a path (or batch of paths)."""
    if isinstance(paths, DirectedPath):
        paths = [paths]
    candidate_sets = [build_candidate_sets_for_path(graph, p, config, rng) for p in paths]
    return edge_loss_with_candidates(
        model, projections, vocab, paths, candidate_sets, config.temperature
    )


def subtask_grounding_loss(
    model: PolicyModel, vocab: ToolVocabulary, pairs: Sequence[tuple[str, int]]
) -> tuple[Tensor, int]:
    """Mean next-token NLL of each tool token given its subtask text.

    ``pairs`` holds (subtask text, tool token id).  Empty subtask texts are
    skipped; the skip count is returned so callers can warn.
    """
    if not pairs:
        raise DataError("subtask grounding needs at least one pair")
    encoded: list[list[int]] = []
    targets: list[int] = []
    skipped = 0
    for text, token_id in pairs:
        ids = vocab.encode_text(text)
        if not ids:
            skipped += 1
            continue
        encoded.append(ids)
        targets.append(token_id)
    if not encoded:
        raise DataError("every subtask text was empty")
    logits, _, lengths = forward_batch(model, encoded)
    rows = torch.stack([logits[i, lengths[i] - 1] for i in range(len(encoded))])
    loss = torch.nn.functional.cross_entropy(
        rows, torch.tensor(targets, dtype=torch.long), reduction="mean"
    )
    return loss, skipped


def _trajectory_with_eos(vocab: ToolVocabulary, sample: TaskSample) -> list[int]:
    if not sample.trajectory:
        raise DataError(f"sample {sample.id!r}: empty trajectory")
    try:
        z = list(encode_trajectory(vocab, sample.trajectory).token_ids)
    except IndexError as exc:
        raise DataError(f"sample {sample.id!r}: {exc}") from exc
    allowed = set(restricted_output_ids(vocab))
    for t in z:
        if t not in allowed:
            raise DataError(f"sample {sample.id!r}: token {t} outside the restricted set")
    return z + [vocab.eos_id]


def build_student_prompt(sample: TaskSample, vocab: ToolVocabulary) -> list[int]:
    """Token ids of the query-only student prompt."""
    return vocab.encode_text(render_student_prompt(sample.query))


def build_teacher_prompt(sample: TaskSample, vocab: ToolVocabulary) -> list[int]:
    """Token ids of the privileged teacher prompt (subtasks + gold tools)."""
    if not sample.subtasks:
        raise DataError(
            f"sample {sample.id!r}: teacher prompt requires subtasks (privileged context)"
        )
    surfaces = [vocab.surface(vocab.token_id_of_tool(t)) for t in sample.trajectory]
    return vocab.encode_text(
        render_teacher_prompt(sample.query, sample.subtasks, surfaces)
    )


def sft_loss_batch(
    model: PolicyModel, vocab: ToolVocabulary, samples: Sequence[TaskSample]
) -> Tensor:
    """Mean over samples of the per-sample summed NLL of gold tokens + eos."""
    if not samples:
        raise DataError("sft batch must be non-empty")
    seqs: list[list[int]] = []
    spans: list[tuple[int, list[int]]] = []
    for s in samples:
        prompt = build_student_prompt(s, vocab)
        z = _trajectory_with_eos(vocab, s)
        seqs.append(prompt + z)
        spans.append((len(prompt), z))
    logits, _, _ = forward_batch(model, seqs)
    per_sample = []
    for i, (plen, z) in enumerate(spans):
        rows = logits[i, plen - 1 : plen - 1 + len(z)]
        tgt = torch.tensor(z, dtype=torch.long)
        per_sample.append(
            torch.nn.functional.cross_entropy(rows, tgt, reduction="sum")
        )
    return torch.stack(per_sample).mean()


def sft_loss(model: PolicyModel, vocab: ToolVocabulary, sample: TaskSample) -> Tensor:
    """Summed NLL of the gold tool tokens (plus eos) given the student prompt."""
    return sft_loss_batch(model, vocab, [sample])


def restricted_distribution(logits: Tensor, restricted_ids: Sequence[int]) -> Tensor:
    """Renormalized softmax over the tool-token/eos slice of the logits."""
    sub = logits.index_select(-1, torch.tensor(list(restricted_ids), dtype=torch.long))
    return torch.softmax(sub, dim=-1)


def sample_rollout(
    model: PolicyModel,
    vocab: ToolVocabulary,
    prompt_ids: Sequence[int],
    temperature: float,
    max_steps: int,
    rng: torch.Generator,
) -> tuple[int, ...]:
    """Ancestral sample over the restricted alphabet; eos terminates."""
    out = generate_many(
        model, [prompt_ids], vocab, mode="sample", max_steps=max_steps,
        rng=rng, temperature=temperature,
    )[0]
    return tuple(out)


@dataclass(frozen=True)
class DistillationBatch:
    """One sample's frozen rollout and prompt pair for distillation."""

    sample: TaskSample
    student_prompt_ids: tuple[int, ...]
    teacher_prompt_ids: tuple[int, ...]
    rollout: tuple[int, ...]
    lam: float


def make_distillation_batch(
    sample: TaskSample,
    vocab: ToolVocabulary,
    student: PolicyModel,
    rng: torch.Generator,
    temperature: float,
    max_steps: int,
    lam: float,
) -> DistillationBatch:
    sp = tuple(build_student_prompt(sample, vocab))
    tp = tuple(build_teacher_prompt(sample, vocab))
    rollout = sample_rollout(student, vocab, sp, temperature, max_steps, rng)
    return DistillationBatch(
        sample=sample, student_prompt_ids=sp, teacher_prompt_ids=tp,
        rollout=rollout, lam=lam,
    )


def _stepwise_kl(
    student_logits: Tensor,
    teacher_logits: Tensor,
    student_plen: int,
    teacher_plen: int,
    rollout_len: int,
    restricted: Sequence[int],
) -> Tensor:
    rest_t = torch.tensor(list(restricted), dtype=torch.long)
    s_rows = student_logits[student_plen - 1 : student_plen - 1 + rollout_len]
    t_rows = teacher_logits[teacher_plen - 1 : teacher_plen - 1 + rollout_len]
    p_s = torch.softmax(s_rows.index_select(1, rest_t), dim=1)
    p_t = torch.softmax(t_rows.index_select(1, rest_t), dim=1)
    kl = (p_s * (torch.log(p_s + _LOG_SMOOTH) - torch.log(p_t + _LOG_SMOOTH))).sum(dim=1)
    return kl.mean()


def opd_loss_given_rollout(
    student: PolicyModel,
    teacher: PolicyModel,
    vocab: ToolVocabulary,
    student_prompt_ids: Sequence[int],
    teacher_prompt_ids: Sequence[int],
    rollout: Sequence[int],
) -> Tensor:
    """Mean stepwise KL(student || teacher) along a fixed rollout.

    Both policies are conditioned on the same student-generated prefix; the
    divergence lives on the restricted output space.  Gradients flow only
    through the student distributions.
    """
    if not rollout:
        raise DataError("rollout must contain at least one step (eos counts)")
    restricted = restricted_output_ids(vocab)
    s_logits, _, _ = forward_batch(student, [list(student_prompt_ids) + list(rollout)])
    with torch.no_grad():
        t_logits, _, _ = forward_batch(teacher, [list(teacher_prompt_ids) + list(rollout)])
    return _stepwise_kl(
        s_logits[0], t_logits[0], len(student_prompt_ids), len(teacher_prompt_ids),
        len(rollout), restricted,
    )


def opd_loss(
    student: PolicyModel,
    teacher: PolicyModel,
    sample: TaskSample,
    vocab: ToolVocabulary,
    rng: torch.Generator,
    rollout_temperature: float = 1.0,
    max_steps: int = 16,
    lam: float = 1.0,
) -> tuple[Tensor, DistillationBatch]:
    """Sample one on-policy rollout and distill the teacher along it."""
    batch = make_distillation_batch(
        sample, vocab, student, rng, rollout_temperature, max_steps, lam
    )
    loss = opd_loss_given_rollout(
        student, teacher, vocab, batch.student_prompt_ids,
        batch.teacher_prompt_ids, batch.rollout,
    )
    return loss, batch


def opd_loss_batch(
    student: PolicyModel,
    teacher: PolicyModel,
    samples: Sequence[TaskSample],
    vocab: ToolVocabulary,
    rng: torch.Generator,
    rollout_temperature: float,
    max_steps: int,
) -> Tensor:
    """Batched distillation: rollouts first, then shared forwards."""
    if not samples:
        raise DataError("distillation batch must be non-empty")
    restricted = restricted_output_ids(vocab)
    sps = [build_student_prompt(s, vocab) for s in samples]
    tps = [build_teacher_prompt(s, vocab) for s in samples]
    rollouts = generate_many(
        student, sps, vocab, mode="sample", max_steps=max_steps,
        rng=rng, temperature=rollout_temperature,
    )
    s_logits, _, _ = forward_batch(
        student, [sp + r for sp, r in zip(sps, rollouts)]
    )
    with torch.no_grad():
        t_logits, _, _ = forward_batch(
            teacher, [tp + r for tp, r in zip(tps, rollouts)]
        )
    losses = [
        _stepwise_kl(
            s_logits[i], t_logits[i], len(sps[i]), len(tps[i]),
            len(rollouts[i]), restricted,
        )
        for i in range(len(samples))
    ]
    return torch.stack(losses).mean()


def combined_loss(sft: Tensor | float, opd: Tensor | float, lam: float) -> Tensor | float:
    """Stage-4 objective: SFT plus lambda-weighted distillation."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    return sft + lam * opd
