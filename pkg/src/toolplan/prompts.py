"""Student and teacher prompt text.

Templates live as versioned text assets next to this module; rendering only
fills the ``{query}`` and ``{reference_solution}`` slots.  The student sees
the query alone.  The teacher additionally receives a reference solution:
one ``Step: k <subtask> Use tool: <token>`` line per step, the concatenated
gold tool tokens, and a closing instruction.
"""

from __future__ import annotations

from importlib import resources
from typing import Sequence

from .errors import DataError

__all__ = [
    "PROMPT_TEMPLATE_VERSION",
    "STUDENT_TEMPLATE",
    "TEACHER_TEMPLATE",
    "render_student_prompt",
    "render_teacher_prompt",
    "render_reference_solution",
    "template_texts",
]

PROMPT_TEMPLATE_VERSION = 1


def _load_asset(name: str) -> str:
    return resources.files("toolplan.assets").joinpath(name).read_text(encoding="utf-8")


STUDENT_TEMPLATE = _load_asset("prompt_student.txt")
TEACHER_TEMPLATE = _load_asset("prompt_teacher.txt")

_STEP_LINE = "Step: {k} {subtask} Use tool: {token}"
_SEQUENCE_HEADER = "Correct tool sequence:"


def render_student_prompt(query: str) -> str:
    return STUDENT_TEMPLATE.replace("{query}", query)


def render_reference_solution(subtasks: Sequence[str], tool_tokens: Sequence[str]) -> str:
    """Numbered step lines followed by the concatenated gold tool tokens."""
    if len(subtasks) != len(tool_tokens):
        raise DataError(
            f"reference solution needs one subtask per tool: "
            f"{len(subtasks)} subtasks vs {len(tool_tokens)} tools"
        )
    if not subtasks:
        raise DataError("reference solution requires at least one step")
    lines = [
        _STEP_LINE.format(k=k, subtask=s, token=t)
        for k, (s, t) in enumerate(zip(subtasks, tool_tokens), start=1)
    ]
    lines.append(_SEQUENCE_HEADER)
    lines.append("".join(tool_tokens))
    return "\n".join(lines)


def render_teacher_prompt(query: str, subtasks: Sequence[str], tool_tokens: Sequence[str]) -> str:
    ref = render_reference_solution(subtasks, tool_tokens)
    return TEACHER_TEMPLATE.replace("{query}", query).replace("{reference_solution}", ref)


def template_texts() -> tuple[str, ...]:
    """All fixed prompt text, slots stripped; used to seed the base lexicon."""
    return (
        STUDENT_TEMPLATE.replace("{query}", ""),
        TEACHER_TEMPLATE.replace("{query}", "").replace("{reference_solution}", ""),
        _STEP_LINE.replace("{k}", "").replace("{subtask}", "").replace("{token}", ""),
        _SEQUENCE_HEADER,
    )
