"""Prompt templates and option permutation.

Two built-in templates: "default" asks the question plainly; "enhanced" adds
an explicit no-refusal clause for models that decline to answer without the
footage. Both end with an instruction to put the final answer on its own
machine-parsable last line.
"""

from __future__ import annotations

import dataclasses
import string
from dataclasses import dataclass
from typing import Mapping

from .corpus import MAX_OPTIONS, QAItem


class PromptError(ValueError):
    pass


def option_letter(index: int) -> str:
    """0 -> 'A', 1 -> 'B', ..."""
    if not 0 <= index < MAX_OPTIONS:
        raise PromptError(f"option index {index} outside A..Z range")
    return chr(ord("A") + index)


def letter_index(letter: str) -> int:
    """'A' -> 0 (case-insensitive)."""
    if len(letter) != 1 or not letter.isalpha():
        raise PromptError(f"not an option letter: {letter!r}")
    return ord(letter.upper()) - ord("A")


_DEFAULT_MCQ = """\
You will be given a question and a set of answer options. Choose the single \
best option.
Finish your reply with the chosen option on its own last line, in the form \
"Answer: <letter>".

Question: {question}

Options:
{options}"""

_DEFAULT_OPEN = """\
Answer the following question as briefly as possible.
Finish your reply with the answer alone on its own last line.

Question: {question}"""

_ENHANCED_MCQ = """\
You will be given a question and a set of answer options. The footage the \
question refers to is unavailable, but you must still commit to the single \
most plausible option. Do not refuse, do not say you need more information; \
use whatever cues the question and options provide.
Finish your reply with the chosen option on its own last line, in the form \
"Answer: <letter>".

Question: {question}

Options:
{options}"""

_ENHANCED_OPEN = """\
Answer the following question as briefly as possible. The footage the \
question refers to is unavailable, but you must still commit to your best \
guess. Do not refuse, do not say you need more information.
Finish your reply with the answer alone on its own last line.

Question: {question}"""


def _check_placeholders(text: str, allowed: set[str], where: str) -> None:
    for _, name, _, _ in string.Formatter().parse(text):
        if name is None:
            continue
        if name not in allowed:
            raise PromptError(
                f"{where}: placeholder {{{name}}} not allowed (allowed: {sorted(allowed)})"
            )


@dataclass(frozen=True)
class PromptTemplate:
    """A pair of format strings, one per question shape."""

    name: str
    mcq: str
    open_ended: str

    def __post_init__(self) -> None:
        _check_placeholders(self.mcq, {"question", "options"}, f"template {self.name!r} (mcq)")
        _check_placeholders(self.open_ended, {"question"}, f"template {self.name!r} (open)")


@dataclass(frozen=True)
class TemplateSet:
    """The named templates in force for a run."""

    default: PromptTemplate
    enhanced: PromptTemplate

    def get(self, name: str) -> PromptTemplate:
        if name == "default":
            return self.default
        if name == "enhanced":
            return self.enhanced
        raise PromptError(f"unknown template: {name!r}")

    @classmethod
    def builtin(cls) -> "TemplateSet":
        return cls(
            default=PromptTemplate("default", _DEFAULT_MCQ, _DEFAULT_OPEN),
            enhanced=PromptTemplate("enhanced", _ENHANCED_MCQ, _ENHANCED_OPEN),
        )

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, Mapping[str, str]]) -> "TemplateSet":
        """Build from a {template name: {"mcq": ..., "open_ended": ...}} mapping.

        Missing templates or missing shapes fall back to the built-ins, so a
        file can override just one of the four bodies.
        """
        base = cls.builtin()
        unknown = set(overrides) - {"default", "enhanced"}
        if unknown:
            raise PromptError(f"unknown template name(s) in override: {sorted(unknown)}")
        templates = {}
        for name in ("default", "enhanced"):
            current = base.get(name)
            entry = overrides.get(name, {})
            bad = set(entry) - {"mcq", "open_ended"}
            if bad:
                raise PromptError(f"template {name!r}: unknown keys {sorted(bad)}")
            templates[name] = PromptTemplate(
                name=name,
                mcq=entry.get("mcq", current.mcq),
                open_ended=entry.get("open_ended", current.open_ended),
            )
        return cls(default=templates["default"], enhanced=templates["enhanced"])


def render_prompt(item: QAItem, template: PromptTemplate) -> str:
    """Render the text sent to a backend. The media reference never appears."""
    if not item.is_mcq:
        return template.open_ended.format(question=item.question)
    if len(item.options) > MAX_OPTIONS:
        raise PromptError(f"cannot letter {len(item.options)} options")
    block = "\n".join(
        f"{option_letter(i)}. {text}" for i, text in enumerate(item.options)
    )
    return template.mcq.format(question=item.question, options=block)


def permute_options(item: QAItem, k: int) -> QAItem:
    """Rotate the option list left by k (mod n), remapping the gold index.

    permute_options(item, 0) is the identity. The returned item drops the
    original raw line since its bytes no longer describe it.
    """
    if not item.is_mcq:
        raise PromptError(f"item {item.id!r} has no options to permute")
    n = len(item.options)
    k = k % n
    rotated = item.options[k:] + item.options[:k]
    assert item.gold.index is not None
    new_gold = (item.gold.index - k) % n
    from .corpus import AnswerKey

    return dataclasses.replace(
        item, options=rotated, gold=AnswerKey.option(new_gold), raw=None
    )
