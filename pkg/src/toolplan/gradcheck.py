"""Finite-difference verification of every training loss on a small setup.

The reference configuration (2 layers, hidden 32, 8-tool graph) is small
enough that a few hundred perturbed coordinates per loss run in seconds,
yet it exercises every code path: grounding, edge reconstruction with
projections, SFT with the eos step, and distillation along a frozen
rollout.  Sampled quantities (candidate sets, rollouts) are drawn once and
closed over, so each loss is a deterministic function of the parameters.
"""

from __future__ import annotations

import random

import torch

from .datagen import CorpusSpec, TaskSample, generate_synthetic_graph, generate_task_corpus
from .graph import PathSamplerConfig, ToolGraph, sample_paths
from .model import (
    ModelConfig,
    PolicyModel,
    finite_difference_check,
    frozen_copy,
    init_model,
)
from .objectives import (
    EdgeObjectiveConfig,
    EdgeProjections,
    build_candidate_sets_for_path,
    build_student_prompt,
    build_teacher_prompt,
    edge_loss_with_candidates,
    opd_loss_given_rollout,
    sample_rollout,
    sft_loss,
    subtask_grounding_loss,
)
from .pipeline import build_subtask_pairs
from .vocab import ToolVocabulary, build_default_lexicon, build_vocab

__all__ = ["ReferenceSetup", "reference_setup", "gradcheck_all"]


class ReferenceSetup:
    def __init__(
        self,
        graph: ToolGraph,
        vocab: ToolVocabulary,
        model: PolicyModel,
        corpus: list[TaskSample],
        model_config: ModelConfig,
    ):
        self.graph = graph
        self.vocab = vocab
        self.model = model
        self.corpus = corpus
        self.model_config = model_config


def reference_setup(seed: int = 7, hidden_dim: int = 32, num_layers: int = 2) -> ReferenceSetup:
    """8-tool graph, tiny verbatim corpus, and a freshly initialized model."""
    graph = generate_synthetic_graph(n_tools=8, n_edges=20, seed=seed)
    spec = CorpusSpec(
        n_train=6, n_val=0, n_test=0,
        length_distribution=(0.25, 0.25, 0.25, 0.25),
        query_style="verbatim", seed=seed,
    )
    corpus, _, _ = generate_task_corpus(graph, spec)
    texts = [s.query for s in corpus] + [t for s in corpus for t in s.subtasks]
    lexicon = build_default_lexicon(graph, texts, max_steps=8)
    vocab = build_vocab(lexicon, graph)
    config = ModelConfig(
        vocab_size=vocab.total_size, hidden_dim=hidden_dim, num_layers=num_layers,
        num_heads=4, max_context=160, seed=seed,
    )
    model = init_model(config, graph, vocab)
    return ReferenceSetup(graph, vocab, model, corpus, config)


def gradcheck_all(
    epsilon: float = 1e-4,
    num_coords: int = 200,
    seed: int = 7,
    setup: ReferenceSetup | None = None,
) -> dict[str, float]:
    """Max relative FD error for each of the four losses."""
    s = setup or reference_setup(seed=seed)
    model, vocab, graph, corpus = s.model, s.vocab, s.graph, s.corpus
    model_params = model.named_parameter_dict()
    results: dict[str, float] = {}

    pairs = build_subtask_pairs(corpus, vocab)[:4]
    results["subtask_grounding"] = finite_difference_check(
        model_params,
        lambda: subtask_grounding_loss(model, vocab, pairs)[0],
        epsilon=epsilon, num_coords=num_coords, seed=seed,
    )

    edge_cfg = EdgeObjectiveConfig(neg_ratio=3, temperature=0.1, projection_dim=8, seed=seed)
    projections = EdgeProjections(s.model_config.hidden_dim, edge_cfg.projection_dim, seed=seed)
    sampler = PathSamplerConfig(
        r_max=4, length_distribution=(0.0, 0.0, 0.5, 0.5), seed=seed
    )
    paths = sample_paths(graph, sampler, 2)
    cand_rng = random.Random(seed)
    candidate_sets = [
        build_candidate_sets_for_path(graph, p, edge_cfg, cand_rng) for p in paths
    ]
    edge_params = dict(model_params)
    edge_params.update(projections.named_parameter_dict())
    results["edge_reconstruction"] = finite_difference_check(
        edge_params,
        lambda: edge_loss_with_candidates(
            model, projections, vocab, paths, candidate_sets, edge_cfg.temperature
        ),
        epsilon=epsilon, num_coords=num_coords, seed=seed,
    )

    sample = corpus[0]
    results["sft"] = finite_difference_check(
        model_params,
        lambda: sft_loss(model, vocab, sample),
        epsilon=epsilon, num_coords=num_coords, seed=seed,
    )

    teacher_model = init_model(
        ModelConfig(
            vocab_size=s.model_config.vocab_size, hidden_dim=s.model_config.hidden_dim,
            num_layers=s.model_config.num_layers, num_heads=s.model_config.num_heads,
            max_context=s.model_config.max_context, seed=seed + 1,
        ),
        graph, vocab,
    )
    teacher = frozen_copy(teacher_model)
    sp = build_student_prompt(sample, vocab)
    tp = build_teacher_prompt(sample, vocab)
    gen = torch.Generator().manual_seed(seed)
    rollout = sample_rollout(model, vocab, sp, temperature=1.0, max_steps=6, rng=gen)
    results["opd"] = finite_difference_check(
        model_params,
        lambda: opd_loss_given_rollout(model, teacher, vocab, sp, tp, rollout),
        epsilon=epsilon, num_coords=num_coords, seed=seed,
    )
    return results
