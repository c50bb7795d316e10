"""Small causal transformer policy plus the training machinery around it.

The model is a pre-norm transformer (self-attention + 2-layer MLP per block)
with sinusoidal position encodings and an untied output head, run entirely in
float64 so gradient checks hold to tight tolerances.  The block before the
last one is the "penultimate layer" whose hidden states feed edge scoring.

Reverse-mode gradients come from torch autograd; the finite-difference
checker below is the independent verification route and never touches
autograd internals.  The optimizer is an explicit bias-corrected
adaptive-moment update with externalized state so checkpoints can carry it.
"""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, ContextLengthError, NumericError
from .graph import ToolGraph
from .vocab import ToolVocabulary, restricted_output_ids, word_tokens

__all__ = [
    "ModelConfig",
    "PolicyModel",
    "ForwardTrace",
    "GradientSet",
    "AdamState",
    "init_model",
    "forward",
    "forward_batch",
    "backward_gradients",
    "finite_difference_check",
    "optimizer_step",
    "generate",
    "generate_many",
    "frozen_copy",
]

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_context: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2 so a penultimate layer exists")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_context < 2:
            raise ConfigError(f"max_context must be >= 2, got {self.max_context}")


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        b, t, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=2)
        q = q.view(b, t, self.heads, dh).transpose(1, 2)
        k = k.view(b, t, self.heads, dh).transpose(1, 2)
        v = v.view(b, t, self.heads, dh).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(dh) + mask[:t, :t]
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(y)


class _Mlp(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        x = x + self.mlp(self.ln2(x))
        return x


def _sinusoidal_positions(max_len: int, dim: int) -> Tensor:
    pe = torch.zeros(max_len, dim, dtype=DTYPE)
    pos = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=DTYPE)
    freq = torch.exp(-math.log(10000.0) * idx / dim)
    ang = pos * freq
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang[:, : dim // 2])
    return pe


class PolicyModel(nn.Module):
    """Causal autoregressive policy over the expanded vocabulary."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embed = nn.Embedding(config.vocab_size, d)
        self.blocks = nn.ModuleList(
            _Block(d, config.num_heads) for _ in range(config.num_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        self.register_buffer("pos", _sinusoidal_positions(config.max_context, d))
        causal = torch.full((config.max_context, config.max_context), float("-inf"), dtype=DTYPE)
        self.register_buffer("causal_mask", torch.triu(causal, diagonal=1))
        self.to(DTYPE)

    def run(self, ids: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Forward a [B, T] id tensor; returns logits and per-block hiddens."""
        b, t = ids.shape
        if t > self.config.max_context:
            raise ContextLengthError(
                f"input length {t} exceeds max_context {self.config.max_context}"
            )
        x = self.embed(ids) + self.pos[:t]
        hiddens: list[Tensor] = []
        for block in self.blocks:
            x = block(x, self.causal_mask)
            hiddens.append(x)
        logits = self.head(self.ln_f(x))
        return logits, hiddens

    def named_parameter_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


@dataclass
class ForwardTrace:
    """Per-position logits and per-layer hidden states for one sequence.

    Tensors stay attached to the autograd graph so losses can be built on
    top of them; ``hidden_by_layer[-2]`` is the penultimate layer.
    """

    logits: Tensor
    hidden_by_layer: tuple[Tensor, ...]
    input_ids: tuple[int, ...]


@dataclass
class GradientSet:
    """Per-parameter gradients (zeros where a parameter did not contribute)."""

    grads: dict[str, Tensor]
    loss_value: float


def init_model(config: ModelConfig, graph: ToolGraph, vocab: ToolVocabulary) -> PolicyModel:
    """Seeded model construction with metadata-initialized tool-token rows.

    Base embedding rows draw from a symmetric normal scaled by 1/sqrt(hidden);
    each tool row is then replaced by the mean of the rows of its description
    words (unknown words skipped; the random row stays if every word is
    unknown).
    """
    if vocab.total_size != config.vocab_size:
        raise ConfigError(
            f"vocab size {vocab.total_size} does not match config.vocab_size {config.vocab_size}"
        )
    if vocab.num_tools != graph.num_tools:
        raise ConfigError(
            f"vocabulary has {vocab.num_tools} tools but graph has {graph.num_tools}"
        )
    model = PolicyModel(config)
    g = torch.Generator().manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    scale = config.hidden_dim ** -0.5
    with torch.no_grad():
        model.embed.weight.normal_(0.0, 1.0, generator=g).mul_(scale)
        for block in model.blocks:
            for ln in (block.ln1, block.ln2):
                ln.weight.fill_(1.0)
                ln.bias.zero_()
            for lin in (block.attn.qkv, block.attn.proj, block.mlp.fc1, block.mlp.fc2):
                fan_in = lin.weight.shape[1]
                lin.weight.normal_(0.0, 1.0, generator=g).mul_(fan_in ** -0.5)
                lin.bias.zero_()
        model.ln_f.weight.fill_(1.0)
        model.ln_f.bias.zero_()
        model.head.weight.normal_(0.0, 1.0, generator=g).mul_(scale)
        for tool in graph.tools:
            ids = [vocab.encode_word(w) for w in word_tokens(tool.description)]
            known = [i for i in ids if i != vocab.unk_id]
            if known:
                row = model.embed.weight[known].mean(dim=0)
                model.embed.weight[vocab.token_id_of_tool(tool.id)] = row
    return model


def forward(model: PolicyModel, ids: Sequence[int]) -> ForwardTrace:
    """Single-sequence forward pass exposing logits and all block outputs."""
    ids_t = torch.tensor([list(ids)], dtype=torch.long)
    logits, hiddens = model.run(ids_t)
    return ForwardTrace(
        logits=logits[0],
        hidden_by_layer=tuple(h[0] for h in hiddens),
        input_ids=tuple(ids),
    )


def forward_batch(
    model: PolicyModel, batch: Sequence[Sequence[int]]
) -> tuple[Tensor, list[Tensor], list[int]]:
    """Right-padded batched forward.

    Returns (logits [B, T, V], per-block hiddens [B, T, H], lengths).  With
    causal masking, right padding cannot leak into real positions; logits at
    padded positions are garbage and must not be read.
    """
    lengths = [len(s) for s in batch]
    t = max(lengths)
    ids_t = torch.zeros(len(batch), t, dtype=torch.long)
    for i, s in enumerate(batch):
        ids_t[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    logits, hiddens = model.run(ids_t)
    return logits, hiddens, lengths


def backward_gradients(loss: Tensor, params: dict[str, Tensor]) -> GradientSet:
    """Exact reverse-mode gradients of ``loss`` for each named parameter.

    Parameters that do not contribute (including frozen ones) get zeros.
    """
    if not torch.is_tensor(loss):
        raise NumericError(f"loss must be a scalar tensor, got {type(loss).__name__}")
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"loss is not finite: {value!r}")
    names, tensors = [], []
    for name, p in params.items():
        if p.requires_grad:
            names.append(name)
            tensors.append(p)
    grads: dict[str, Tensor] = {}
    if tensors and loss.grad_fn is not None:
        computed = torch.autograd.grad(loss, tensors, allow_unused=True)
        for name, p, gr in zip(names, tensors, computed):
            grads[name] = torch.zeros_like(p) if gr is None else gr
    for name, p in params.items():
        if name not in grads:
            grads[name] = torch.zeros_like(p)
    for name, gr in grads.items():
        if not torch.isfinite(gr).all():
            raise NumericError(f"gradient for {name!r} is not finite")
    return GradientSet(grads=grads, loss_value=value)


def finite_difference_check(
    params: dict[str, Tensor],
    loss_builder: Callable[[], Tensor],
    epsilon: float = 1e-4,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_builder`` must be a deterministic function of the parameters.
    Coordinates are sampled uniformly over all parameter entries; each is
    perturbed by +-epsilon and compared against the analytic gradient with
    denominator max(|fd|, |grad|, 1e-6).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ConfigError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    analytic = backward_gradients(loss_builder(), params)
    names = list(params)
    sizes = [params[n].numel() for n in names]
    total = sum(sizes)
    rng = random.Random(seed)
    picks = rng.sample(range(total), min(num_coords, total))
    max_rel = 0.0
    with torch.no_grad():
        for flat in picks:
            i = 0
            while flat >= sizes[i]:
                flat -= sizes[i]
                i += 1
            p = params[names[i]].view(-1)
            orig = p[flat].item()
            p[flat] = orig + epsilon
            lp = float(loss_builder())
            p[flat] = orig - epsilon
            lm = float(loss_builder())
            p[flat] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            g = analytic.grads[names[i]].view(-1)[flat].item()
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel


@dataclass
class AdamState:
    """Externalized optimizer state: step counts and both moment tensors."""

    step: dict[str, int] = field(default_factory=dict)
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, Tensor],
    grads: GradientSet,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    b1, b2 = betas
    with torch.no_grad():
        for name, p in params.items():
            g = grads.grads.get(name)
            if g is None:
                raise ConfigError(f"gradient set is missing parameter {name!r}")
            if g.shape != p.shape:
                raise ConfigError(
                    f"gradient shape {tuple(g.shape)} != parameter shape "
                    f"{tuple(p.shape)} for {name!r}"
                )
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
                state.step[name] = 0
            state.step[name] += 1
            t = state.step[name]
            state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = state.m[name] / (1.0 - b1 ** t)
            v_hat = state.v[name] / (1.0 - b2 ** t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


GenerateMode = Literal["greedy", "sample", "graph_masked"]


def generate(
    model: PolicyModel,
    prompt_ids: Sequence[int],
    vocab: ToolVocabulary,
    mode: GenerateMode = "greedy",
    max_steps: int = 16,
    rng: torch.Generator | None = None,
    graph: ToolGraph | None = None,
    temperature: float = 1.0,
) -> list[int]:
    """Autoregressively emit tokens from the restricted output alphabet.

    Returns the generated ids only (terminal eos included when emitted).
    Logits outside the tool-token/eos set are masked to -inf before
    selection, so the output can never contain a hallucinated token.  In
    graph_masked mode the candidate set after the first tool shrinks to the
    previous tool's successors plus eos.
    """
    return generate_many(
        model, [prompt_ids], vocab, mode=mode, max_steps=max_steps, rng=rng,
        graph=graph, temperature=temperature,
    )[0]


def generate_many(
    model: PolicyModel,
    prompts: Sequence[Sequence[int]],
    vocab: ToolVocabulary,
    mode: GenerateMode = "greedy",
    max_steps: int = 16,
    rng: torch.Generator | None = None,
    graph: ToolGraph | None = None,
    temperature: float = 1.0,
) -> list[list[int]]:
    """Batched generation; prompts are grouped by length to share forwards.

    Group processing order follows first occurrence in ``prompts``, so a
    fixed rng yields reproducible samples for a fixed prompt list.
    """
    if mode == "graph_masked" and graph is None:
        raise ConfigError("graph_masked generation requires a graph")
    if mode == "sample":
        if rng is None:
            raise ConfigError("sample mode requires an rng")
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
    # Candidate columns in ascending token-id order (eos precedes the tool
    # block), so argmax's first-max rule realizes the lowest-id tie-break.
    candidates = tuple(sorted(restricted_output_ids(vocab)))
    cand_t = torch.tensor(candidates, dtype=torch.long)
    results: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)

    for plen, idxs in by_len.items():
        ids = torch.tensor([list(prompts[i]) for i in idxs], dtype=torch.long)
        out: list[list[int]] = [[] for _ in idxs]
        done = [False] * len(idxs)
        prev_tool: list[int | None] = [None] * len(idxs)
        for _ in range(max_steps):
            if all(done) or ids.shape[1] >= model.config.max_context:
                break
            with torch.no_grad():
                logits, _ = model.run(ids)
            step = logits[:, -1, :].index_select(1, cand_t)  # [B, M+1]
            if mode == "graph_masked":
                for b in range(len(idxs)):
                    if prev_tool[b] is not None:
                        allowed = set(graph.successors(prev_tool[b]))
                        for col, tid in enumerate(candidates):
                            if tid != vocab.eos_id and vocab.tool_id_of(tid) not in allowed:
                                step[b, col] = float("-inf")
            if mode == "sample":
                probs = torch.softmax(step / temperature, dim=1)
                cols = torch.multinomial(probs, 1, generator=rng).squeeze(1)
            else:
                cols = step.argmax(dim=1)  # first max wins: lowest token id
            next_ids = []
            for b, col in enumerate(cols.tolist()):
                tok = vocab.eos_id if done[b] else candidates[col]
                next_ids.append(tok)
                if not done[b]:
                    out[b].append(tok)
                    if tok == vocab.eos_id:
                        done[b] = True
                    else:
                        prev_tool[b] = vocab.tool_id_of(tok)
            ids = torch.cat([ids, torch.tensor(next_ids, dtype=torch.long).unsqueeze(1)], dim=1)
        for b, i in enumerate(idxs):
            results[i] = out[b]
    return results  # type: ignore[return-value]


def frozen_copy(model: PolicyModel) -> PolicyModel:
    """Deep copy with every parameter detached from training."""
    twin = copy.deepcopy(model)
    for p in twin.parameters():
        p.requires_grad_(False)
    twin.eval()
    return twin
