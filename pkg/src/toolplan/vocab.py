"""Expanded vocabulary: word-level base tokens plus one atomic token per tool.

Token id layout is ``[base words][eos][unk][tool tokens]``; the tool block is
contiguous and ordered by tool id, so the tool <-> token mapping is a fixed
offset.  Text encoding is word-level: tool surfaces (``<Name_With_Underscores>``)
are matched atomically and case-sensitively, everything else splits into
lowercased ``[A-Za-z0-9_]+`` runs, and unknown words map to the unk token.
Instances are immutable after construction.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DataError, VocabCollisionError
from .graph import ToolGraph
from .prompts import template_texts

__all__ = [
    "ToolVocabulary",
    "EncodedTrajectory",
    "DecodedTrajectory",
    "build_vocab",
    "encode_trajectory",
    "decode_tokens",
    "restricted_output_ids",
    "tool_surface",
    "word_tokens",
    "build_default_lexicon",
    "load_vocab",
]

EOS_SURFACE = "<eos>"
UNK_SURFACE = "<unk>"

_WORD_RE = re.compile(r"[A-Za-z0-9_]+")


def word_tokens(text: str) -> list[str]:
    """Lowercased word-level tokens; whitespace and punctuation delimit."""
    return [w.lower() for w in _WORD_RE.findall(text)]


def tool_surface(name: str) -> str:
    """Atomic surface form of a tool token: non-alphanumerics become '_'."""
    return "<" + "".join(c if c.isalnum() else "_" for c in name) + ">"


class ToolVocabulary:
    """Base word vocabulary extended with eos, unk, and the tool-token block."""

    def __init__(self, base_tokens: Sequence[str], tool_surfaces: Sequence[str]):
        self.base_tokens: tuple[str, ...] = tuple(base_tokens)
        self.tool_surfaces: tuple[str, ...] = tuple(tool_surfaces)
        self.eos_id: int = len(self.base_tokens)
        self.unk_id: int = self.eos_id + 1
        self._tool_base: int = self.unk_id + 1
        self.num_tools: int = len(self.tool_surfaces)
        self.total_size: int = self._tool_base + self.num_tools
        self.tool_token_ids: dict[int, int] = {
            i: self._tool_base + i for i in range(self.num_tools)
        }
        self._word_to_id = {w: i for i, w in enumerate(self.base_tokens)}
        self._surface_to_tool = {s: i for i, s in enumerate(self.tool_surfaces)}
        if self.tool_surfaces:
            alternation = "|".join(re.escape(s) for s in self.tool_surfaces)
            self._scan_re = re.compile(f"(?:{alternation})|[A-Za-z0-9_]+")
        else:
            self._scan_re = _WORD_RE

    # --- id classification -------------------------------------------------
    def is_tool_token(self, token_id: int) -> bool:
        return self._tool_base <= token_id < self.total_size

    def tool_id_of(self, token_id: int) -> int:
        if not self.is_tool_token(token_id):
            raise IndexError(f"token id {token_id} is not a tool token")
        return token_id - self._tool_base

    def token_id_of_tool(self, tool_id: int) -> int:
        if not (0 <= tool_id < self.num_tools):
            raise IndexError(f"tool id {tool_id} out of range [0, {self.num_tools})")
        return self._tool_base + tool_id

    def surface(self, token_id: int) -> str:
        if token_id == self.eos_id:
            return EOS_SURFACE
        if token_id == self.unk_id:
            return UNK_SURFACE
        if self.is_tool_token(token_id):
            return self.tool_surfaces[token_id - self._tool_base]
        if 0 <= token_id < len(self.base_tokens):
            return self.base_tokens[token_id]
        raise IndexError(f"token id {token_id} out of range [0, {self.total_size})")

    # --- text encoding -----------------------------------------------------
    def encode_word(self, word: str) -> int:
        return self._word_to_id.get(word.lower(), self.unk_id)

    def encode_text(self, text: str) -> list[int]:
        """Word-level encoding; tool surfaces stay atomic, unknowns map to unk."""
        out: list[int] = []
        for m in self._scan_re.finditer(text):
            tok = m.group(0)
            tool = self._surface_to_tool.get(tok)
            if tool is not None:
                out.append(self._tool_base + tool)
            else:
                out.append(self._word_to_id.get(tok.lower(), self.unk_id))
        return out

    # --- serialization -----------------------------------------------------
    def dump(self) -> str:
        """Ordered token list with roles, for checkpoint compatibility checks."""
        tokens = [{"t": w, "role": "base"} for w in self.base_tokens]
        tokens.append({"t": EOS_SURFACE, "role": "eos"})
        tokens.append({"t": UNK_SURFACE, "role": "unk"})
        tokens.extend(
            {"t": s, "role": "tool", "tool_id": i}
            for i, s in enumerate(self.tool_surfaces)
        )
        return json.dumps({"version": 1, "tokens": tokens}, ensure_ascii=False) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"ToolVocabulary(base={len(self.base_tokens)}, tools={self.num_tools})"


@dataclass(frozen=True)
class EncodedTrajectory:
    """Tool-token ids for one trajectory, in order, without eos."""

    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class DecodedTrajectory:
    """Result of mapping generated token ids back to tools.

    ``generated_count`` counts tokens consumed before eos (eos excluded);
    ``hallucinated_count`` is how many of those were not tool tokens.
    """

    tool_ids: tuple[int, ...]
    hallucinated_count: int
    generated_count: int


def build_vocab(base_lexicon: Sequence[str], graph: ToolGraph) -> ToolVocabulary:
    """Build the expanded vocabulary for a graph over a word-level base lexicon."""
    if not base_lexicon:
        raise DataError("base lexicon must be non-empty")
    if len(set(base_lexicon)) != len(base_lexicon):
        raise DataError("base lexicon contains duplicates")
    surfaces = []
    seen: dict[str, str] = {}
    for t in graph.tools:
        s = tool_surface(t.name)
        if s in seen:
            raise VocabCollisionError(
                f"tools {seen[s]!r} and {t.name!r} both normalize to {s!r}"
            )
        if s in (EOS_SURFACE, UNK_SURFACE):
            raise VocabCollisionError(f"tool {t.name!r} collides with reserved token {s!r}")
        seen[s] = t.name
        surfaces.append(s)
    return ToolVocabulary(base_tokens=base_lexicon, tool_surfaces=surfaces)


def encode_trajectory(vocab: ToolVocabulary, tools: Sequence[int]) -> EncodedTrajectory:
    """Map a tool-id sequence to its tool-token ids, order preserved."""
    return EncodedTrajectory(token_ids=tuple(vocab.token_id_of_tool(t) for t in tools))


def decode_tokens(vocab: ToolVocabulary, ids: Sequence[int]) -> DecodedTrajectory:
    """Invert tool tokens to tool ids, stopping at eos.

    Non-tool tokens before eos are hallucinated positions: consumed and
    counted, never mapped.  Hallucination is data here, not a failure.
    """
    tool_ids: list[int] = []
    hallucinated = 0
    generated = 0
    for tid in ids:
        if tid == vocab.eos_id:
            break
        generated += 1
        if vocab.is_tool_token(tid):
            tool_ids.append(vocab.tool_id_of(tid))
        else:
            hallucinated += 1
    return DecodedTrajectory(
        tool_ids=tuple(tool_ids),
        hallucinated_count=hallucinated,
        generated_count=generated,
    )


def restricted_output_ids(vocab: ToolVocabulary) -> tuple[int, ...]:
    """Tool-token ids ascending, then eos: the legal generation alphabet."""
    return tuple(vocab.token_id_of_tool(i) for i in range(vocab.num_tools)) + (vocab.eos_id,)


def build_default_lexicon(
    graph: ToolGraph,
    texts: Iterable[str] = (),
    max_steps: int = 16,
) -> list[str]:
    """Deterministic base lexicon covering prompts, tool metadata, and ``texts``.

    Includes the numerals used by reference-solution step numbering up to
    ``max_steps``.  Sorted so the id assignment is reproducible.
    """
    words: set[str] = set()
    for t in graph.tools:
        words.update(word_tokens(t.name))
        words.update(word_tokens(t.description))
    for fixed in template_texts():
        words.update(word_tokens(fixed))
    for text in texts:
        words.update(word_tokens(text))
    words.update(str(k) for k in range(1, max_steps + 1))
    return sorted(words)


def load_vocab(source: str) -> ToolVocabulary:
    """Rebuild a vocabulary from its ``dump()`` JSON string."""
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise DataError(f"vocabulary file is not valid JSON: {exc}") from exc
    tokens = doc.get("tokens")
    if not isinstance(tokens, list):
        raise DataError("vocabulary file must contain a 'tokens' list")
    base: list[str] = []
    tools: list[str] = []
    for rec in tokens:
        role = rec.get("role")
        if role == "base":
            base.append(rec["t"])
        elif role == "tool":
            tools.append(rec["t"])
        elif role not in ("eos", "unk"):
            raise DataError(f"unknown token role {role!r}")
    return ToolVocabulary(base_tokens=base, tool_surfaces=tools)
