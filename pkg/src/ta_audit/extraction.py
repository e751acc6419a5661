"""Answer extraction from free-form model replies, and the correctness judge.

Extraction is a fixed-priority grammar: an explicit final-answer line beats a
lone letter line, which beats unique option-text containment, which beats
refusal detection, which beats the open-ended fallback. The first rule that
fires wins; extraction is total and never raises on arbitrary text.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .backends import RawResponse
from .corpus import QAItem
from .prompting import letter_index, option_letter

DEFAULT_REFUSAL_TERMS = (
    "cannot answer",
    "can't answer",
    "cannot determine",
    "need the video",
    "need to see the video",
    "need the image",
    "need to see the image",
    "unable to determine without",
    "without seeing",
    "unable to answer",
    "refuse to answer",
    "not enough information",
)

# "Answer: B", "the answer is (c)", "**Answer:** D." etc.; the captured letter
# must not be the start of a longer word ("Answer: Barcelona" is no match).
_FINAL_LINE_RE = re.compile(
    r"\banswer\s*(?:is\b|:)[\s*_`\"'(\[{]*([A-Za-z])(?![A-Za-z0-9])",
    re.IGNORECASE,
)

_LINE_DECOR = " \t*_`\"'()[]{}<>.,:;!?-"

_TERMINAL_PUNCT = ".?!,;:"


def normalize_answer(text: str) -> str:
    """Lowercase, trim, collapse runs of whitespace."""
    return re.sub(r"\s+", " ", text.strip().lower())


def _strip_terminal_punct(text: str) -> str:
    return text.rstrip(_TERMINAL_PUNCT).rstrip()


def load_refusal_terms(path: str | Path) -> tuple[str, ...]:
    """One term per line; blank lines and #-comments ignored."""
    terms = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            terms.append(line.lower())
    return tuple(terms)


@dataclass(frozen=True)
class ExtractedAnswer:
    """Outcome of running the grammar over one reply."""

    kind: str  # "letter" | "free-text" | "refusal" | "unparsable"
    letter: str | None = None
    text: str | None = None
    rule: int = 0  # which grammar rule fired (1..5); 0 for none

    @property
    def is_refusal(self) -> bool:
        return self.kind == "refusal"


def _rule_final_answer_line(text: str, n_options: int) -> str | None:
    last = None
    for match in _FINAL_LINE_RE.finditer(text):
        letter = match.group(1).upper()
        if letter_index(letter) < n_options:
            last = letter
    return last


def _rule_lone_letter_line(text: str, n_options: int) -> str | None:
    last = None
    for line in text.splitlines():
        core = line.strip(_LINE_DECOR)
        # ASCII guard: exotic alphabetic chars (ligatures, accented letters)
        # are never option letters, and some upcase to multiple chars
        if (
            len(core) == 1
            and core.isascii()
            and core.isalpha()
            and letter_index(core) < n_options
        ):
            last = core.upper()
    return last


_ARTICLE_RE = re.compile(r"^(?:a|an|the)\s+")


def _containment_pattern(option: str) -> re.Pattern[str]:
    norm = normalize_answer(option)
    stripped = _ARTICLE_RE.sub("", norm)
    body = re.escape(stripped if stripped else norm)
    # A leading article on the option is treated as optional so "A rope"
    # still matches a reply phrased "the rope".
    return re.compile(rf"\b(?:(?:a|an|the)\s+)?{body}\b")


def _rule_option_containment(text: str, options: Sequence[str]) -> int | None:
    norm_text = normalize_answer(text)
    hits = [
        i for i, option in enumerate(options)
        if _containment_pattern(option).search(norm_text)
    ]
    if len(hits) == 1:
        return hits[0]
    return None


def _rule_refusal(text: str, terms: Iterable[str]) -> bool:
    norm = normalize_answer(text)
    return any(term in norm for term in terms)


def extract(
    text: str,
    item: QAItem,
    refusal_terms: Sequence[str] = DEFAULT_REFUSAL_TERMS,
) -> ExtractedAnswer:
    """Run the grammar over one reply for one item (total; never raises)."""
    if not isinstance(text, str):
        text = str(text)
    n = len(item.options)

    if item.is_mcq:
        letter = _rule_final_answer_line(text, n)
        if letter is not None:
            return ExtractedAnswer(kind="letter", letter=letter, rule=1)
        letter = _rule_lone_letter_line(text, n)
        if letter is not None:
            return ExtractedAnswer(kind="letter", letter=letter, rule=2)
        index = _rule_option_containment(text, item.options)
        if index is not None:
            return ExtractedAnswer(kind="letter", letter=option_letter(index), rule=3)

    if _rule_refusal(text, refusal_terms):
        return ExtractedAnswer(kind="refusal", rule=4)

    if item.is_mcq:
        return ExtractedAnswer(kind="unparsable", rule=5)

    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        return ExtractedAnswer(kind="unparsable", rule=5)
    final = _strip_terminal_punct(normalize_answer(lines[-1]))
    if not final:
        return ExtractedAnswer(kind="unparsable", rule=5)
    return ExtractedAnswer(kind="free-text", text=final, rule=5)


def _as_number(text: str) -> float | None:
    try:
        return float(text.replace(",", ""))
    except ValueError:
        return None


def judge(extracted: ExtractedAnswer, item: QAItem) -> bool:
    """True iff the extracted answer matches the item's gold.

    For MCQ the item must be the same (possibly permuted) variant the prompt
    was rendered from, so its gold index names the letter that was correct in
    that prompt. Refusals and unparsable replies are wrong by definition.
    """
    if extracted.kind == "letter":
        if not item.is_mcq:
            return False
        assert extracted.letter is not None and item.gold.index is not None
        return letter_index(extracted.letter) == item.gold.index
    if extracted.kind == "free-text":
        if item.is_mcq:
            return False
        assert extracted.text is not None and item.gold.text is not None
        gold = _strip_terminal_punct(normalize_answer(item.gold.text))
        if extracted.text == gold:
            return True
        got, want = _as_number(extracted.text), _as_number(gold)
        if got is not None and want is not None:
            return math.isclose(got, want, rel_tol=1e-6, abs_tol=0.0)
        return False
    return False


@dataclass
class Verdict:
    """One judged trial: what was asked, what came back, whether it was right."""

    item_id: str
    backend_id: str
    protocol: str
    trial_index: int
    raw: RawResponse
    extracted: ExtractedAnswer
    correct: bool
    refused: bool = field(default=False)

    def __post_init__(self) -> None:
        self.refused = self.extracted.is_refusal
