"""Four-stage optimization pipeline with checkpointing and stage resume.

Stage order: (1) subtask grounding, (2) edge reconstruction over freshly
sampled path corpora, (3) query-to-tool SFT, (4) combined SFT + on-policy
distillation against a frozen teacher copied from the SFT checkpoint.

Determinism contract: every random stream is derived from the global seed,
a stage tag, and epoch/batch indices, never from wall clock or prior-stage
consumption.  Resuming stage N from the stage N-1 checkpoint therefore
reproduces the uninterrupted run bitwise.  Each stage starts with fresh
optimizer state (stages optimize different objectives).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import save_checkpoint
from .datagen import TaskSample, empirical_length_distribution
from .errors import ConfigError, DataError, TrainingDivergedError
from .graph import PathSamplerConfig, ToolGraph, sample_paths
from .metrics import MetricsReport, PredictionRecord, evaluate_corpus
from .model import (
    AdamState,
    ModelConfig,
    PolicyModel,
    backward_gradients,
    frozen_copy,
    generate_many,
    init_model,
    optimizer_step,
)
from .objectives import (
    EdgeObjectiveConfig,
    EdgeProjections,
    build_student_prompt,
    combined_loss,
    edge_reconstruction_loss,
    opd_loss_batch,
    sft_loss_batch,
    subtask_grounding_loss,
)
from .vocab import ToolVocabulary, decode_tokens

__all__ = [
    "TrainConfig",
    "StageReport",
    "PipelineResult",
    "STAGE_NAMES",
    "derive_seed",
    "build_subtask_pairs",
    "train_pipeline",
    "decode_corpus",
    "records_from_predictions",
]

STAGE_NAMES = ("grounding", "edge", "sft", "distill")
_DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class TrainConfig:
    """Per-stage budgets plus the shared training knobs."""

    epochs_sub: int = 2
    epochs_edge: int = 2
    epochs_sft: int = 20
    epochs_distill: int = 2
    batch_size_sub: int = 64
    batch_size_edge: int = 16
    batch_size_sft: int = 32
    batch_size_distill: int = 16
    lr_sub: float = 3e-4
    lr_edge: float = 3e-4
    lr_sft: float = 3e-4
    lr_distill: float = 1e-4
    lam: float = 0.7
    path_corpus_size: int = 512
    edge: EdgeObjectiveConfig = field(default_factory=EdgeObjectiveConfig)
    rollout_temperature: float = 1.0
    rollout_max_steps: int | None = None
    seed: int = 0
    eval_every: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("epochs_sub", "epochs_edge", "epochs_sft", "epochs_distill"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in (
            "batch_size_sub", "batch_size_edge", "batch_size_sft", "batch_size_distill",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.path_corpus_size < 1:
            raise ConfigError("path_corpus_size must be >= 1")

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        edge_doc = doc.pop("edge", None)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if edge_doc is not None:
            edge_known = {f.name for f in dataclasses.fields(EdgeObjectiveConfig)}
            bad = set(edge_doc) - edge_known
            if bad:
                raise ConfigError(f"unknown edge config keys: {sorted(bad)}")
            doc["edge"] = EdgeObjectiveConfig(**edge_doc)
        return TrainConfig(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        return doc


@dataclass
class StageReport:
    """Outcome of one stage; wall time is reported separately from the
    deterministic artifact stream so repeated runs stay byte-identical."""

    stage: str
    epochs: int
    steps: int
    final_loss: float | None
    checkpoint_path: str
    eval_snapshots: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_json_line(self) -> str:
        doc = {
            "stage": self.stage,
            "epochs": self.epochs,
            "steps": self.steps,
            "final_loss": self.final_loss,
            "checkpoint_path": self.checkpoint_path,
            "eval_snapshots": self.eval_snapshots,
        }
        return json.dumps(doc, sort_keys=True)


@dataclass
class PipelineResult:
    model: PolicyModel
    projections: EdgeProjections
    reports: list[StageReport]
    vocab_hash: str


def derive_seed(base: int, *tags) -> int:
    """Stable 63-bit seed from the global seed and a tag path."""
    text = "|".join([str(base), *map(str, tags)])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF


def build_subtask_pairs(
    corpus: Sequence[TaskSample], vocab: ToolVocabulary
) -> list[tuple[str, int]]:
    """Flatten every (subtask text, tool token id) pair, duplicates kept."""
    pairs: list[tuple[str, int]] = []
    for s in corpus:
        if len(s.subtasks) != len(s.trajectory):
            raise DataError(
                f"sample {s.id!r}: {len(s.subtasks)} subtasks vs "
                f"{len(s.trajectory)} tools"
            )
        for text, tool in zip(s.subtasks, s.trajectory):
            pairs.append((text, vocab.token_id_of_tool(tool)))
    return pairs


def _check_loss(value: float, stage: str, epoch: int, step: int) -> None:
    import math

    if not math.isfinite(value) or value > _DIVERGENCE_BOUND:
        raise TrainingDivergedError(stage, epoch, step, value)


def _shuffled_batches(n: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    idx = list(range(n))
    rng.shuffle(idx)
    return [idx[i : i + batch_size] for i in range(0, n, batch_size)]


def decode_corpus(
    model: PolicyModel,
    vocab: ToolVocabulary,
    samples: Sequence[TaskSample],
    mode: str = "greedy",
    graph: ToolGraph | None = None,
    temperature: float = 1.0,
    gen_seed: int = 0,
    max_steps: int | None = None,
    batch_size: int = 64,
) -> list[PredictionRecord]:
    """Greedy/sampled/graph-masked decoding of a corpus into records."""
    if max_steps is None:
        max_steps = max(s.length for s in samples) + 2
    records: list[PredictionRecord] = []
    rng = torch.Generator().manual_seed(derive_seed(gen_seed, "decode"))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        prompts = [build_student_prompt(s, vocab) for s in chunk]
        outputs = generate_many(
            model, prompts, vocab, mode=mode, max_steps=max_steps,
            rng=rng if mode == "sample" else None,
            graph=graph, temperature=temperature,
        )
        for s, out in zip(chunk, outputs):
            dec = decode_tokens(vocab, out)
            records.append(
                PredictionRecord(
                    sample_id=s.id,
                    pred=dec.tool_ids,
                    gold=s.trajectory,
                    hallucinated_token_count=dec.hallucinated_count,
                    generated_token_count=dec.generated_count,
                )
            )
    return records


def _val_em(model: PolicyModel, vocab: ToolVocabulary, val: Sequence[TaskSample]) -> float:
    records = decode_corpus(model, vocab, val, mode="greedy")
    return sum(1 for r in records if r.pred == r.gold) / len(records)


def train_pipeline(
    graph: ToolGraph,
    vocab: ToolVocabulary,
    corpus: Sequence[TaskSample],
    val_corpus: Sequence[TaskSample],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path,
    start_stage: int = 1,
    init_model_state: PolicyModel | None = None,
    init_projections: EdgeProjections | None = None,
) -> PipelineResult:
    """Run stages ``start_stage``..4, checkpointing after each.

    Stage 4 freezes a teacher from the entering (SFT) parameters and updates
    only the student.  Zero-epoch stages are skipped but still checkpointed
    so the ``stage{1..4}/final.ckpt`` layout is complete.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    if not (1 <= start_stage <= 4):
        raise ConfigError(f"start_stage must be in 1..4, got {start_stage}")
    if start_stage > 1 and init_model_state is None:
        raise ConfigError("resuming beyond stage 1 requires an initial checkpoint")
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    out_dir = Path(out_dir)
    vocab_hash = vocab.content_hash()

    if init_model_state is not None:
        model = init_model_state
    else:
        model = init_model(model_config, graph, vocab)
    if init_projections is not None:
        projections = init_projections
    else:
        projections = EdgeProjections(
            model_config.hidden_dim, config.edge.projection_dim,
            seed=derive_seed(config.seed, "projections"),
        )

    seed = config.seed
    reports: list[StageReport] = []

    def _all_params() -> dict[str, torch.Tensor]:
        return model.named_parameter_dict()

    def _save(stage_idx: int, optimizer: AdamState | None) -> str:
        rel = f"stage{stage_idx}/final.ckpt"
        params = dict(model.named_parameter_dict())
        params.update(projections.named_parameter_dict())
        save_checkpoint(out_dir / rel, model_config, params, optimizer, vocab_hash)
        return rel  # relative so reports stay byte-identical across run dirs

    def _maybe_eval(snapshots: list[dict], epoch: int) -> None:
        if config.eval_every > 0 and val_corpus and (epoch + 1) % config.eval_every == 0:
            snapshots.append({"epoch": epoch + 1, "val_em": _val_em(model, vocab, val_corpus)})

    # Stage 1: subtask grounding -------------------------------------------
    if start_stage <= 1:
        t0 = time.monotonic()
        pairs = build_subtask_pairs(corpus, vocab)
        state = AdamState()
        params = _all_params()
        final_loss = None
        steps = 0
        for epoch in range(config.epochs_sub):
            rng = random.Random(derive_seed(seed, "sub", epoch))
            for bi, batch_idx in enumerate(
                _shuffled_batches(len(pairs), config.batch_size_sub, rng)
            ):
                loss, _ = subtask_grounding_loss(
                    model, vocab, [pairs[i] for i in batch_idx]
                )
                grads = backward_gradients(loss, params)
                _check_loss(grads.loss_value, "grounding", epoch, bi)
                optimizer_step(params, grads, state, config.lr_sub)
                final_loss = grads.loss_value
                steps += 1
        reports.append(
            StageReport(
                stage="grounding", epochs=config.epochs_sub, steps=steps,
                final_loss=final_loss, checkpoint_path=_save(1, state),
                wall_time_s=time.monotonic() - t0,
            )
        )

    # Stage 2: edge reconstruction ------------------------------------------
    if start_stage <= 2:
        t0 = time.monotonic()
        length_dist = empirical_length_distribution(corpus)
        state = AdamState()
        params = _all_params()
        params.update(projections.named_parameter_dict())
        final_loss = None
        steps = 0
        for epoch in range(config.epochs_edge):
            sampler = PathSamplerConfig(
                r_max=len(length_dist), length_distribution=length_dist,
                seed=derive_seed(seed, "paths", epoch),
            )
            paths = sample_paths(graph, sampler, config.path_corpus_size)
            rng = random.Random(derive_seed(seed, "edge", epoch))
            cand_rng = random.Random(derive_seed(seed, "cand", epoch))
            for bi, batch_idx in enumerate(
                _shuffled_batches(len(paths), config.batch_size_edge, rng)
            ):
                loss = edge_reconstruction_loss(
                    model, projections, vocab, graph,
                    [paths[i] for i in batch_idx], config.edge, cand_rng,
                )
                if loss is None:
                    continue
                grads = backward_gradients(loss, params)
                _check_loss(grads.loss_value, "edge", epoch, bi)
                optimizer_step(params, grads, state, config.lr_edge)
                final_loss = grads.loss_value
                steps += 1
        reports.append(
            StageReport(
                stage="edge", epochs=config.epochs_edge, steps=steps,
                final_loss=final_loss, checkpoint_path=_save(2, state),
                wall_time_s=time.monotonic() - t0,
            )
        )

    # Stage 3: query-to-tool SFT --------------------------------------------
    if start_stage <= 3:
        t0 = time.monotonic()
        state = AdamState()
        params = _all_params()
        final_loss = None
        steps = 0
        snapshots: list[dict] = []
        for epoch in range(config.epochs_sft):
            rng = random.Random(derive_seed(seed, "sft", epoch))
            for bi, batch_idx in enumerate(
                _shuffled_batches(len(corpus), config.batch_size_sft, rng)
            ):
                loss = sft_loss_batch(model, vocab, [corpus[i] for i in batch_idx])
                grads = backward_gradients(loss, params)
                _check_loss(grads.loss_value, "sft", epoch, bi)
                optimizer_step(params, grads, state, config.lr_sft)
                final_loss = grads.loss_value
                steps += 1
            _maybe_eval(snapshots, epoch)
        reports.append(
            StageReport(
                stage="sft", epochs=config.epochs_sft, steps=steps,
                final_loss=final_loss, checkpoint_path=_save(3, state),
                eval_snapshots=snapshots, wall_time_s=time.monotonic() - t0,
            )
        )

    # Stage 4: SFT + on-policy distillation ----------------------------------
    t0 = time.monotonic()
    teacher = frozen_copy(model)
    max_len = max(s.length for s in corpus)
    rollout_cap = (
        config.rollout_max_steps if config.rollout_max_steps is not None else max_len + 2
    )
    state = AdamState()
    params = _all_params()
    final_loss = None
    steps = 0
    snapshots = []
    for epoch in range(config.epochs_distill):
        rng = random.Random(derive_seed(seed, "distill", epoch))
        for bi, batch_idx in enumerate(
            _shuffled_batches(len(corpus), config.batch_size_distill, rng)
        ):
            batch = [corpus[i] for i in batch_idx]
            sft = sft_loss_batch(model, vocab, batch)
            if config.lam > 0:
                gen = torch.Generator().manual_seed(
                    derive_seed(seed, "rollout", epoch, bi)
                )
                opd = opd_loss_batch(
                    model, teacher, batch, vocab, gen,
                    config.rollout_temperature, rollout_cap,
                )
                loss = combined_loss(sft, opd, config.lam)
            else:
                loss = sft
            grads = backward_gradients(loss, params)
            _check_loss(grads.loss_value, "distill", epoch, bi)
            optimizer_step(params, grads, state, config.lr_distill)
            final_loss = grads.loss_value
            steps += 1
        _maybe_eval(snapshots, epoch)
    reports.append(
        StageReport(
            stage="distill", epochs=config.epochs_distill, steps=steps,
            final_loss=final_loss, checkpoint_path=_save(4, state),
            eval_snapshots=snapshots, wall_time_s=time.monotonic() - t0,
        )
    )

    return PipelineResult(
        model=model, projections=projections, reports=reports, vocab_hash=vocab_hash
    )


def records_from_predictions(
    graph: ToolGraph, records: Sequence[PredictionRecord], k_list: Sequence[int] = (1, 3)
) -> MetricsReport:
    """Thin wrapper so callers needn't import metrics directly."""
    return evaluate_corpus(graph, records, k_list)
