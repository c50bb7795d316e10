"""Command-line entry point covering the full workflow.

Subcommands: gen-graph, gen-data, train, eval, plan, sample-paths,
gradcheck.  Every run that writes artifacts also writes a ``manifest.json``
recording the effective configuration and its hash; two runs with identical
manifests produce byte-identical outputs.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    load_checkpoint,
    model_from_checkpoint,
    projections_from_checkpoint,
)
from .datagen import (
    DATAGEN_TEMPLATE_VERSION,
    CorpusSpec,
    generate_synthetic_graph,
    generate_task_corpus,
    read_corpus,
    write_corpus,
)
from .errors import ConfigError, DataError, NumericError, ToolPlanError
from .gradcheck import gradcheck_all
from .graph import PathSamplerConfig, dump_graph, load_graph, sample_paths
from .metrics import evaluate_corpus
from .model import ModelConfig, generate
from .pipeline import TrainConfig, decode_corpus, train_pipeline
from .prompts import PROMPT_TEMPLATE_VERSION, render_student_prompt
from .vocab import build_default_lexicon, build_vocab, load_vocab

_MODES = {"greedy": "greedy", "sample": "sample", "graph-masked": "graph_masked"}


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    import hashlib

    payload = {"command": command, "config": config}
    digest = hashlib.sha256(_canonical_json(payload).encode("utf-8")).hexdigest()
    doc = {
        "command": command,
        "config": config,
        "config_sha256": digest,
        "versions": {
            "package": __version__,
            "prompt_templates": PROMPT_TEMPLATE_VERSION,
            "datagen_templates": DATAGEN_TEMPLATE_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_text(path: str, kind: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {kind} file {path}: {exc}") from exc


def _length_distribution(args) -> tuple[float, ...]:
    if getattr(args, "length_dist", None):
        try:
            dist = tuple(float(x) for x in args.length_dist.split(","))
        except ValueError as exc:
            raise ConfigError(f"--length-dist must be comma-separated floats: {exc}") from exc
    else:
        n = args.max_len
        dist = tuple(1.0 / n for _ in range(n))
    total = sum(dist)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"length distribution sums to {total!r}, expected 1.0")
    return dist


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for raw in overrides:
        if "=" not in raw:
            raise ConfigError(f"--set expects key=value, got {raw!r}")
        key, raw_value = raw.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        cursor = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in cursor or not isinstance(cursor[part], dict):
                raise ConfigError(f"--set {key!r}: unknown section {part!r}")
            cursor = cursor[part]
        cursor[parts[-1]] = value
    return doc


def _parse_train_config(doc: dict) -> tuple[dict, TrainConfig]:
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model_doc = dict(doc.get("model", {}))
    allowed = {"hidden_dim", "num_layers", "num_heads", "max_context", "seed", "vocab_size"}
    bad = set(model_doc) - allowed
    if bad:
        raise ConfigError(f"unknown model config keys: {sorted(bad)}")
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    return model_doc, train_cfg


def cmd_gen_graph(args) -> int:
    graph = generate_synthetic_graph(args.tools, args.edges, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.json").write_text(dump_graph(graph))
    _write_manifest(out, "gen-graph", {"tools": args.tools, "edges": args.edges, "seed": args.seed})
    return 0


def cmd_gen_data(args) -> int:
    graph = load_graph(_read_text(args.graph, "graph"))
    dist = _length_distribution(args)
    spec = CorpusSpec(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        length_distribution=dist, query_style=args.style, seed=args.seed,
    )
    train, val, test = generate_task_corpus(graph, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(train, out / "train.jsonl", graph)
    write_corpus(val, out / "val.jsonl", graph)
    write_corpus(test, out / "test.jsonl", graph)
    _write_manifest(
        out, "gen-data",
        {
            "graph": str(args.graph), "n_train": args.n_train, "n_val": args.n_val,
            "n_test": args.n_test, "length_distribution": list(dist),
            "style": args.style, "seed": args.seed,
        },
    )
    return 0


def cmd_train(args) -> int:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(_read_text(args.config, "config"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    doc = _apply_overrides(doc, args.set or [])
    model_doc, train_cfg = _parse_train_config(doc)

    graph = load_graph(_read_text(args.graph, "graph"))
    train_corpus = read_corpus(args.train_data, graph)
    val_corpus = read_corpus(args.val_data, graph) if args.val_data else []
    if not train_corpus:
        raise DataError("training corpus is empty")

    max_len = max(s.length for s in train_corpus + list(val_corpus))
    texts = [s.query for s in train_corpus] + [t for s in train_corpus for t in s.subtasks]
    texts += [s.query for s in val_corpus] + [t for s in val_corpus for t in s.subtasks]
    lexicon = build_default_lexicon(graph, texts, max_steps=max_len + 2)
    vocab = build_vocab(lexicon, graph)
    declared = model_doc.pop("vocab_size", None)
    if declared is not None and declared != vocab.total_size:
        raise ConfigError(
            f"config vocab_size {declared} != built vocabulary size {vocab.total_size}"
        )
    model_config = ModelConfig(vocab_size=vocab.total_size, **model_doc)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(vocab.dump())

    init_model_state = None
    init_projections = None
    if args.init_checkpoint:
        ckpt = load_checkpoint(args.init_checkpoint, expected_vocab_hash=vocab.content_hash())
        init_model_state = model_from_checkpoint(ckpt, vocab)
        init_projections = projections_from_checkpoint(ckpt)

    result = train_pipeline(
        graph, vocab, train_corpus, val_corpus, model_config, train_cfg, out,
        start_stage=args.start_stage, init_model_state=init_model_state,
        init_projections=init_projections,
    )

    with open(out / "stage_reports.jsonl", "w", encoding="utf-8") as fh:
        for rep in result.reports:
            fh.write(rep.to_json_line() + "\n")
    timings = {rep.stage: rep.wall_time_s for rep in result.reports}
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    effective = {
        "model": {**model_doc, "vocab_size": vocab.total_size},
        "train": train_cfg.to_dict(),
        "graph": str(args.graph),
        "train_data": str(args.train_data),
        "val_data": str(args.val_data) if args.val_data else None,
        "start_stage": args.start_stage,
        "init_checkpoint": str(args.init_checkpoint) if args.init_checkpoint else None,
    }
    _write_manifest(out, "train", effective)
    return 0


def _load_eval_state(args):
    graph = load_graph(_read_text(args.graph, "graph"))
    vocab = load_vocab(_read_text(args.vocab, "vocabulary"))
    ckpt = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.content_hash())
    model = model_from_checkpoint(ckpt, vocab)
    return graph, vocab, model


def cmd_eval(args) -> int:
    torch.set_num_threads(max(1, args.threads))
    graph, vocab, model = _load_eval_state(args)
    corpus = read_corpus(args.data, graph)
    if not corpus:
        raise DataError("evaluation corpus is empty")
    mode = _MODES[args.mode]
    records = decode_corpus(
        model, vocab, corpus, mode=mode, graph=graph,
        temperature=args.temperature, gen_seed=args.gen_seed,
        max_steps=args.max_steps,
    )
    report = evaluate_corpus(graph, records, k_list=tuple(args.pa_k))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "id": r.sample_id,
                        "pred": [graph.name_of(t) for t in r.pred],
                        "gold": [graph.name_of(t) for t in r.gold],
                        "halluc": r.hallucinated_token_count,
                        "gen": r.generated_token_count,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(out / "per_sample.jsonl", "w", encoding="utf-8") as fh:
        for row in report.per_sample:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table())
    _write_manifest(
        out, "eval",
        {
            "checkpoint": str(args.checkpoint), "graph": str(args.graph),
            "vocab": str(args.vocab), "data": str(args.data), "mode": args.mode,
            "temperature": args.temperature, "gen_seed": args.gen_seed,
            "max_steps": args.max_steps, "pa_k": list(args.pa_k),
        },
    )
    print(report.to_table(), end="")
    return 0


def cmd_plan(args) -> int:
    graph, vocab, model = _load_eval_state(args)
    prompt = vocab.encode_text(render_student_prompt(args.query))
    mode = _MODES[args.mode]
    out_ids = generate(
        model, prompt, vocab, mode=mode, max_steps=args.max_steps, graph=graph
    )
    print("".join(vocab.surface(t) for t in out_ids if t != vocab.eos_id))
    return 0


def cmd_sample_paths(args) -> int:
    graph = load_graph(_read_text(args.graph, "graph"))
    dist = _length_distribution(args)
    try:
        cfg = PathSamplerConfig(r_max=len(dist), length_distribution=dist, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = sample_paths(graph, cfg, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "paths.jsonl", "w", encoding="utf-8") as fh:
        for p in paths:
            fh.write(json.dumps({"nodes": [graph.name_of(t) for t in p.nodes]}) + "\n")
    _write_manifest(
        out, "sample-paths",
        {
            "graph": str(args.graph), "n": args.n,
            "length_distribution": list(dist), "seed": args.seed,
        },
    )
    return 0


def cmd_gradcheck(args) -> int:
    torch.set_num_threads(max(1, args.threads))
    results = gradcheck_all(epsilon=args.epsilon, num_coords=args.coords, seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max_rel_err={err:.3e}")
    print(f"overall: max_rel_err={worst:.3e} tolerance={args.tolerance:.1e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        _write_manifest(
            out, "gradcheck",
            {"epsilon": args.epsilon, "coords": args.coords, "seed": args.seed},
        )
    if worst >= args.tolerance:
        raise NumericError(
            f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance:.1e}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolplan",
        description="Graph-constrained tool-sequence planner workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-graph", help="generate a synthetic tool graph")
    p.add_argument("--tools", type=int, required=True)
    p.add_argument("--edges", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_graph)

    p = sub.add_parser("gen-data", help="generate a synthetic task corpus")
    p.add_argument("--graph", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--length-dist", default=None, help="comma-separated probabilities")
    p.add_argument("--style", choices=("verbatim", "paraphrase"), default="verbatim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the four-stage training pipeline")
    p.add_argument("--config", default=None, help="JSON config with model/train sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[])
    p.add_argument("--graph", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--start-stage", type=int, default=1, choices=(1, 2, 3, 4))
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a corpus and compute metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=tuple(_MODES), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--pa-k", type=int, nargs="+", default=[1, 3])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="decode a single query to a tool-token string")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--mode", choices=("greedy", "graph-masked"), default="greedy")
    p.add_argument("--max-steps", type=int, default=16)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sample-paths", help="dump sampled directed paths")
    p.add_argument("--graph", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--length-dist", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_paths)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ToolPlanError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
