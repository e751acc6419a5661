"""Multi-model consensus filtering and TA-cause categorization.

An item survives curation when fewer than `threshold` backends answered it
without the media. Uncovered decisions count as visually-grounded votes, so
coverage gaps keep items rather than dropping them.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import (
    Backend,
    BackendError,
    BackendSpec,
    Transport,
    file_digest,
    sha256_hex,
)
from .corpus import Dataset, QAItem, SubsetResult, write_subset
from .prompting import option_letter
from .protocols import (
    COVERAGE_UNCOVERED,
    CoverageError,
    ItemDecision,
    Preset,
    load_decisions,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 2

VOTE_UNCOVERED = "uncovered"


class CurationError(ValueError):
    pass


@dataclass
class ConsensusDecision:
    """Per-item outcome of the multi-model vote."""

    item_id: str
    votes: dict[str, str]  # backend id -> "TA" | "VG" | "uncovered"
    n_models_correct: int
    retained: bool


def consensus(
    decisions: Mapping[str, ItemDecision], threshold: int = DEFAULT_THRESHOLD
) -> ConsensusDecision:
    """Combine one item's decisions across backends.

    n_models_correct counts TA votes only; an uncovered decision is recorded
    as such and weighs like a VG vote. Retained iff fewer than `threshold`
    backends found the item text-only answerable.
    """
    if not decisions:
        raise CurationError("consensus needs at least one backend decision")
    if threshold < 1:
        raise CurationError("threshold must be >= 1")
    item_ids = {d.item_id for d in decisions.values()}
    if len(item_ids) != 1:
        raise CurationError(f"consensus saw mixed item ids: {sorted(item_ids)}")

    votes: dict[str, str] = {}
    n_correct = 0
    for backend_id, decision in decisions.items():
        if decision.coverage == COVERAGE_UNCOVERED:
            votes[backend_id] = VOTE_UNCOVERED
        else:
            votes[backend_id] = decision.label
            if decision.is_ta:
                n_correct += 1
    return ConsensusDecision(
        item_id=item_ids.pop(),
        votes=votes,
        n_models_correct=n_correct,
        retained=n_correct < threshold,
    )


def consensus_over_stores(
    stores: Mapping[str, Sequence[ItemDecision]],
    item_ids: Sequence[str],
    threshold: int = DEFAULT_THRESHOLD,
) -> list[ConsensusDecision]:
    """Vote item by item across full decision stores.

    Every store must contain exactly one decision per dataset item; missing
    or stray decisions are configuration errors, not silent gaps.
    """
    wanted = set(item_ids)
    indexed: dict[str, dict[str, ItemDecision]] = {}
    for backend_id, decisions in stores.items():
        by_id: dict[str, ItemDecision] = {}
        for decision in decisions:
            if decision.item_id not in wanted:
                raise CurationError(
                    f"store {backend_id!r}: decision for unknown item {decision.item_id!r}"
                )
            if decision.item_id in by_id:
                raise CurationError(
                    f"store {backend_id!r}: duplicate decision for {decision.item_id!r}"
                )
            by_id[decision.item_id] = decision
        missing = wanted - set(by_id)
        if missing:
            sample = ", ".join(sorted(missing)[:5])
            raise CurationError(
                f"store {backend_id!r}: missing {len(missing)} decision(s): {sample}"
            )
        indexed[backend_id] = by_id

    return [
        consensus({b: indexed[b][item_id] for b in indexed}, threshold)
        for item_id in item_ids
    ]


@dataclass
class VariantResult:
    subset: SubsetResult
    manifest: dict
    manifest_path: Path


def build_variant(
    preset: Preset,
    store_paths: Mapping[str, str | Path],
    dataset: Dataset,
    out_path: str | Path,
    *,
    dataset_path: str | Path | None = None,
    threshold: int | None = None,
    max_uncovered: float | None = None,
) -> VariantResult:
    """Filter a dataset through a preset's consensus rule.

    Writes the retained subset (input bytes preserved) and a manifest
    recording the vote configuration, counts, and input digests.
    """
    if len(store_paths) != len(preset.roles):
        raise CurationError(
            f"preset {preset.name!r} expects {len(preset.roles)} decision store(s), "
            f"got {len(store_paths)}"
        )
    threshold = preset.threshold if threshold is None else threshold

    stores = {
        backend_id: load_decisions(path) for backend_id, path in store_paths.items()
    }
    votes = consensus_over_stores(stores, dataset.ids, threshold)

    total_votes = sum(len(s) for s in stores.values())
    uncovered = sum(
        1 for s in stores.values() for d in s if d.coverage == COVERAGE_UNCOVERED
    )
    if max_uncovered is not None and total_votes:
        fraction = uncovered / total_votes
        if fraction > max_uncovered:
            raise CoverageError(
                f"uncovered fraction {fraction:.4f} exceeds ceiling {max_uncovered:.4f}"
            )

    keep = {v.item_id for v in votes if v.retained}
    subset = write_subset(dataset, keep, out_path)

    manifest = {
        "preset": preset.name,
        "backends": [
            {
                "id": backend_id,
                "protocol": "+".join(sorted({d.protocol for d in stores[backend_id]})),
            }
            for backend_id in store_paths
        ],
        "threshold": threshold,
        "total": len(dataset),
        "retained": subset.kept,
        "retention_rate": round(subset.kept / len(dataset), 6),
        "uncovered": uncovered,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "input_digests": {
            backend_id: file_digest(Path(path))
            for backend_id, path in store_paths.items()
        },
    }
    if dataset_path is not None:
        manifest["input_digests"]["dataset"] = file_digest(Path(dataset_path))

    manifest_path = Path(out_path).with_suffix(".manifest.json")
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.info(
        "variant %s: retained %d/%d (%.1f%%)",
        preset.name,
        subset.kept,
        len(dataset),
        100.0 * subset.kept / len(dataset),
    )
    return VariantResult(subset=subset, manifest=manifest, manifest_path=manifest_path)


# --- why was it answerable? ------------------------------------------------

TA_CATEGORIES: Mapping[str, str] = {
    "textual-shortcut": (
        "the phrasing of the question or options gives the answer away "
        "(a telltale word, grammatical agreement, or an option that restates "
        "the question)"
    ),
    "external-knowledge": (
        "general world knowledge or common sense answers it; the footage "
        "only illustrates a fact that holds anyway"
    ),
    "inferential-elimination": (
        "the wrong options are implausible enough to eliminate by reasoning, "
        "leaving the answer"
    ),
    "imagined-content": (
        "one can imagine a typical scene matching the description, and that "
        "imagined scene already contains the answer"
    ),
}


@dataclass(frozen=True)
class TACategory:
    value: str
    rationale: str

    def __post_init__(self) -> None:
        if self.value not in TA_CATEGORIES:
            raise CurationError(f"unknown TA category: {self.value!r}")


def build_category_prompt(item: QAItem) -> str:
    lines = [
        f"A text-only audit answered this {item.modality} question correctly "
        "without the footage. Decide why that was possible.",
        "",
        "Pick exactly one category:",
    ]
    for name, definition in TA_CATEGORIES.items():
        lines.append(f"- {name}: {definition}")
    lines.append("")
    lines.append(f"Question: {item.question}")
    if item.is_mcq:
        lines.append("Options:")
        for i, option in enumerate(item.options):
            lines.append(f"{option_letter(i)}. {option}")
        assert item.gold.index is not None
        lines.append(
            f"Correct answer: {option_letter(item.gold.index)}. "
            f"{item.options[item.gold.index]}"
        )
    else:
        lines.append(f"Correct answer: {item.gold.text}")
    lines.append("")
    lines.append(
        "Explain briefly, then put the single category name alone on the last line."
    )
    return "\n".join(lines)


_CATEGORY_PATTERNS = {
    name: re.compile(r"\b" + name.replace("-", r"[\s_-]*") + r"\b", re.IGNORECASE)
    for name in TA_CATEGORIES
}


def _parse_category(text: str) -> str | None:
    hits = [name for name, pattern in _CATEGORY_PATTERNS.items() if pattern.search(text)]
    if len(hits) == 1:
        return hits[0]
    return None


def categorize_ta(item: QAItem, judge: Backend) -> TACategory | None:
    """Ask the judge backend to classify why an item was answerable.

    Forced choice among the four categories; an unparsable or ambiguous
    reply is retried once with a fresh sample. Still unparsable (or a judge
    failure) leaves the item unassigned; the caller flags those.
    """
    prompt = build_category_prompt(item)
    for sample_index in (0, 1):
        try:
            raw = judge.complete(prompt, sample_index=sample_index)
        except BackendError as exc:
            log.warning("category judge failed on %s: %s", item.id, exc)
            return None
        value = _parse_category(raw.text)
        if value is not None:
            return TACategory(value=value, rationale=raw.text)
    return None


class CategoryOracle:
    """Scripted stand-in for the category judge.

    Behaviors per item id: a category name (always answered), "ambiguous"
    (names two categories, never parses), or "garbage". Anything else the
    oracle is asked raises, like the answer oracle does.
    """

    def __init__(
        self,
        dataset: Dataset,
        behaviors: Mapping[str, str] | None = None,
        default_behavior: str = "external-knowledge",
    ):
        self.behaviors = dict(behaviors or {})
        self.default_behavior = default_behavior
        self._index = {
            sha256_hex(build_category_prompt(item)): item for item in dataset
        }

    def transport(self, spec: BackendSpec) -> Transport:
        from .backends import ScriptError

        def call(prompt: str, sample_index: int) -> tuple[str, str]:
            item = self._index.get(sha256_hex(prompt))
            if item is None:
                raise ScriptError(
                    f"judge {spec.id!r}: unscripted category prompt"
                )
            behavior = self.behaviors.get(item.id, self.default_behavior)
            if behavior in TA_CATEGORIES:
                return f"Scripted rationale.\n{behavior}", "stop"
            if behavior == "ambiguous":
                return "Could be textual-shortcut or external-knowledge.", "stop"
            if behavior == "garbage":
                return "no category applies, sorry", "stop"
            raise ScriptError(f"unknown judge behavior: {behavior!r}")

        return call
