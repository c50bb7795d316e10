import math
import random

import pytest
import torch

from toolplan.checkpoint import (
    load_checkpoint,
    model_from_checkpoint,
    projections_from_checkpoint,
    save_checkpoint,
)
from toolplan.datagen import CorpusSpec, generate_synthetic_graph, generate_task_corpus
from toolplan.errors import CheckpointError, ConfigError, DataError, TrainingDivergedError
from toolplan.model import AdamState, ModelConfig, backward_gradients, init_model, optimizer_step
from toolplan.objectives import EdgeObjectiveConfig, sft_loss_batch
from toolplan.pipeline import (
    TrainConfig,
    _check_loss,
    _shuffled_batches,
    build_subtask_pairs,
    decode_corpus,
    derive_seed,
    train_pipeline,
)
from toolplan.vocab import build_default_lexicon, build_vocab


@pytest.fixture(scope="module")
def tiny():
    graph = generate_synthetic_graph(6, 18, seed=2)
    spec = CorpusSpec(
        n_train=24, n_val=8, n_test=0,
        length_distribution=(0.4, 0.4, 0.2), seed=5,
    )
    train, val, _ = generate_task_corpus(graph, spec)
    texts = [s.query for s in train + val] + [t for s in train + val for t in s.subtasks]
    vocab = build_vocab(build_default_lexicon(graph, texts, max_steps=5), graph)
    mc = ModelConfig(vocab_size=vocab.total_size, hidden_dim=16, num_layers=2,
                     num_heads=2, max_context=192, seed=3)
    return graph, vocab, train, val, mc


def tiny_config(**overrides):
    base = dict(
        epochs_sub=1, epochs_edge=1, epochs_sft=1, epochs_distill=1,
        batch_size_sub=8, batch_size_edge=8, batch_size_sft=8, batch_size_distill=8,
        path_corpus_size=16, lam=0.7, seed=5,
        edge=EdgeObjectiveConfig(neg_ratio=2, temperature=0.1, projection_dim=8),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestCheckpointFormat:
    def test_save_load_save_is_idempotent(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        state = AdamState()
        save_checkpoint(p1, mc, model.named_parameter_dict(), state, vocab.content_hash())
        ckpt = load_checkpoint(p1)
        save_checkpoint(p2, ckpt.model_config, ckpt.params, ckpt.optimizer, ckpt.vocab_hash)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tensors_round_trip_bitwise(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, mc, model.named_parameter_dict(), None, vocab.content_hash())
        ckpt = load_checkpoint(path)
        restored = model_from_checkpoint(ckpt, vocab)
        for (n1, a), (n2, b) in zip(model.named_parameters(), restored.named_parameters()):
            assert n1 == n2 and torch.equal(a, b)

    def test_vocab_hash_mismatch_rejected(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, mc, model.named_parameter_dict(), None, vocab.content_hash())
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(path, expected_vocab_hash="0" * 64)

    def test_truncation_detected(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, mc, model.named_parameter_dict(), None, vocab.content_hash())
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, mc, model.named_parameter_dict(), None, vocab.content_hash())
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)


class TestBuildSubtaskPairs:
    def test_four_step_sample_gives_four_pairs(self, tiny):
        graph, vocab, train, _, _ = tiny
        sample = train[0]
        pairs = build_subtask_pairs([sample], vocab)
        assert len(pairs) == sample.length
        assert pairs[0][0] == sample.subtasks[0]
        assert pairs[0][1] == vocab.token_id_of_tool(sample.trajectory[0])

    def test_empty_corpus(self, tiny):
        _, vocab, _, _, _ = tiny
        assert build_subtask_pairs([], vocab) == []

    def test_count_equals_total_trajectory_length(self, tiny):
        graph, vocab, train, _, _ = tiny
        pairs = build_subtask_pairs(train, vocab)
        assert len(pairs) == sum(s.length for s in train)

    def test_duplicates_preserved(self, tiny):
        graph, vocab, train, _, _ = tiny
        pairs = build_subtask_pairs([train[0], train[0]], vocab)
        assert len(pairs) == 2 * train[0].length


class TestTrainPipeline:
    def test_stage_layout_and_reports(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        result = train_pipeline(graph, vocab, train, val, mc, tiny_config(), tmp_path / "run")
        assert [r.stage for r in result.reports] == ["grounding", "edge", "sft", "distill"]
        for i in range(1, 5):
            assert (tmp_path / "run" / f"stage{i}" / "final.ckpt").exists()
        for rep in result.reports:
            assert rep.final_loss is None or math.isfinite(rep.final_loss)
            assert "wall_time" not in rep.to_json_line()

    def test_total_optimizer_steps_invariant(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config(epochs_sub=2, epochs_edge=1, epochs_sft=2, epochs_distill=1)
        result = train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "run")
        by_stage = {r.stage: r for r in result.reports}
        n_pairs = sum(s.length for s in train)
        assert by_stage["grounding"].steps == 2 * math.ceil(n_pairs / cfg.batch_size_sub)
        assert by_stage["edge"].steps == 1 * math.ceil(cfg.path_corpus_size / cfg.batch_size_edge)
        assert by_stage["sft"].steps == 2 * math.ceil(len(train) / cfg.batch_size_sft)
        assert by_stage["distill"].steps == 1 * math.ceil(len(train) / cfg.batch_size_distill)

    def test_run_twice_is_bitwise_identical(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config()
        train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "a")
        train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "b")
        for i in range(1, 5):
            a = (tmp_path / "a" / f"stage{i}" / "final.ckpt").read_bytes()
            b = (tmp_path / "b" / f"stage{i}" / "final.ckpt").read_bytes()
            assert a == b, f"stage {i} differs"

    def test_zero_distill_epochs_keep_sft_checkpoint(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config(epochs_distill=0)
        train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "run")
        c3 = load_checkpoint(tmp_path / "run" / "stage3" / "final.ckpt")
        c4 = load_checkpoint(tmp_path / "run" / "stage4" / "final.ckpt")
        for name in c3.params:
            assert torch.equal(c3.params[name], c4.params[name])

    def test_lambda_zero_equals_sft_continuation(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config(epochs_distill=2, lam=0.0)
        result = train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "run")

        # independent SFT continuation from the stage-3 checkpoint, using the
        # published seed-derivation contract
        c3 = load_checkpoint(tmp_path / "run" / "stage3" / "final.ckpt")
        model = model_from_checkpoint(c3, vocab)
        params = model.named_parameter_dict()
        state = AdamState()
        for epoch in range(2):
            rng = random.Random(derive_seed(cfg.seed, "distill", epoch))
            for batch_idx in _shuffled_batches(len(train), cfg.batch_size_distill, rng):
                loss = sft_loss_batch(model, vocab, [train[i] for i in batch_idx])
                grads = backward_gradients(loss, params)
                optimizer_step(params, grads, state, cfg.lr_distill)
        final = result.model.named_parameter_dict()
        for name, p in params.items():
            assert torch.equal(p, final[name]), f"{name} differs"

    def test_resume_stage4_matches_uninterrupted_run(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config()
        train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "full")
        c3_path = tmp_path / "full" / "stage3" / "final.ckpt"
        ckpt = load_checkpoint(c3_path, expected_vocab_hash=vocab.content_hash())
        resumed = train_pipeline(
            graph, vocab, train, val, mc, cfg, tmp_path / "resumed",
            start_stage=4,
            init_model_state=model_from_checkpoint(ckpt, vocab),
            init_projections=projections_from_checkpoint(ckpt),
        )
        assert [r.stage for r in resumed.reports] == ["distill"]
        a = (tmp_path / "full" / "stage4" / "final.ckpt").read_bytes()
        b = (tmp_path / "resumed" / "stage4" / "final.ckpt").read_bytes()
        assert a == b

    def test_resume_requires_checkpoint(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        with pytest.raises(ConfigError):
            train_pipeline(graph, vocab, train, val, mc, tiny_config(),
                           tmp_path / "x", start_stage=3)

    def test_empty_corpus_rejected(self, tiny, tmp_path):
        graph, vocab, _, val, mc = tiny
        with pytest.raises(DataError):
            train_pipeline(graph, vocab, [], val, mc, tiny_config(), tmp_path / "x")

    def test_eval_snapshots_recorded(self, tiny, tmp_path):
        graph, vocab, train, val, mc = tiny
        cfg = tiny_config(epochs_sft=2, eval_every=1)
        result = train_pipeline(graph, vocab, train, val, mc, cfg, tmp_path / "run")
        sft = next(r for r in result.reports if r.stage == "sft")
        assert len(sft.eval_snapshots) == 2
        assert all(0.0 <= s["val_em"] <= 1.0 for s in sft.eval_snapshots)


class TestDecodeCorpus:
    def test_records_align_with_samples(self, tiny):
        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        records = decode_corpus(model, vocab, val, mode="greedy")
        assert [r.sample_id for r in records] == [s.id for s in val]
        assert all(r.gold == s.trajectory for r, s in zip(records, val))
        assert all(r.hallucinated_count == 0 for r in [])  # vacuous guard

    def test_graph_masked_mode_is_always_legal(self, tiny):
        from toolplan.graph import validate_trajectory

        graph, vocab, train, val, mc = tiny
        model = init_model(mc, graph, vocab)
        records = decode_corpus(model, vocab, val, mode="graph_masked", graph=graph)
        for r in records:
            if len(r.pred) > 1:
                assert validate_trajectory(graph, r.pred)


class TestGuards:
    def test_divergence_guard(self):
        with pytest.raises(TrainingDivergedError):
            _check_loss(float("nan"), "sft", 0, 1)
        with pytest.raises(TrainingDivergedError):
            _check_loss(2e6, "sft", 0, 1)
        _check_loss(10.0, "sft", 0, 1)

    def test_train_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown train config keys"):
            TrainConfig.from_dict({"lr_stt": 1.0})
        with pytest.raises(ConfigError, match="unknown edge config keys"):
            TrainConfig.from_dict({"edge": {"negratio": 3}})

    def test_train_config_nested_edge(self):
        cfg = TrainConfig.from_dict({"lam": 0.3, "edge": {"neg_ratio": 4}})
        assert cfg.lam == 0.3
        assert cfg.edge.neg_ratio == 4
        assert cfg.edge.temperature == 0.1

    def test_negative_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs_sft=-1)
