"""Audit protocols: how many times to ask, and how to turn trials into labels.

A text-only answerable (TA) item is one a backend answers correctly without
the media; everything else is visually grounded (VG). Single-pass asks once;
circular re-asks under rotated option orders and requires a clean sweep for
TA; pass-at-k samples K times and calls the item TA if any sample lands.
Items a backend cannot cover (hard errors) are labeled VG conservatively.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backends import Backend, BackendError, RawResponse
from .corpus import Dataset, QAItem
from .extraction import DEFAULT_REFUSAL_TERMS, ExtractedAnswer, Verdict, extract, judge
from .prompting import TemplateSet, permute_options, render_prompt

log = logging.getLogger(__name__)

PROTOCOL_KINDS = ("single-pass", "circular", "pass-at-k")

LABEL_TA = "TA"
LABEL_VG = "VG"

COVERAGE_EVALUATED = "evaluated"
COVERAGE_UNCOVERED = "uncovered"


class ProtocolError(ValueError):
    pass


class CoverageError(RuntimeError):
    """Uncovered fraction exceeded the configured ceiling."""


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str
    n_permutations: int = 1
    k: int = 1
    template: str = "default"
    escalate_on_refusal: bool = False

    def __post_init__(self) -> None:
        if self.kind not in PROTOCOL_KINDS:
            raise ProtocolError(f"unknown protocol kind: {self.kind!r}")
        if self.kind == "circular" and self.n_permutations < 1:
            raise ProtocolError("circular requires n_permutations >= 1")
        if self.kind == "pass-at-k" and self.k < 1:
            raise ProtocolError("pass-at-k requires k >= 1")
        if self.template not in ("default", "enhanced"):
            raise ProtocolError(f"unknown template: {self.template!r}")

    @property
    def label(self) -> str:
        if self.kind == "circular":
            return f"circular:{self.n_permutations}"
        if self.kind == "pass-at-k":
            return f"pass-at-k:{self.k}"
        return self.kind


def parse_protocol(text: str, **overrides) -> ProtocolSpec:
    """Parse 'single-pass', 'circular:N', 'pass-at-k:K' (alias 'pass@K')."""
    text = text.strip()
    name, _, arg = text.partition(":")
    name = name.lower()
    try:
        if name == "single-pass" and not arg:
            return ProtocolSpec(kind="single-pass", **overrides)
        if name == "circular":
            return ProtocolSpec(kind="circular", n_permutations=int(arg), **overrides)
        if name == "pass-at-k":
            return ProtocolSpec(kind="pass-at-k", k=int(arg), **overrides)
        if name.startswith("pass@") and not arg:
            return ProtocolSpec(kind="pass-at-k", k=int(name[len("pass@"):]), **overrides)
    except ValueError as exc:
        raise ProtocolError(f"bad protocol spec {text!r}: {exc}") from None
    raise ProtocolError(f"bad protocol spec {text!r}")


@dataclass(frozen=True)
class ProtocolAssignment:
    """Which protocol an item gets, by question shape."""

    mcq: ProtocolSpec
    open_ended: ProtocolSpec

    def __post_init__(self) -> None:
        if self.open_ended.kind == "circular":
            raise ProtocolError("open-ended items cannot run a circular protocol")

    def for_item(self, item: QAItem) -> ProtocolSpec:
        return self.mcq if item.is_mcq else self.open_ended

    @classmethod
    def uniform(cls, spec: ProtocolSpec) -> "ProtocolAssignment":
        """One protocol for every shape; circular degrades to single-pass
        for open-ended items (there is nothing to rotate)."""
        if spec.kind == "circular":
            fallback = ProtocolSpec(
                kind="single-pass",
                template=spec.template,
                escalate_on_refusal=spec.escalate_on_refusal,
            )
            return cls(mcq=spec, open_ended=fallback)
        return cls(mcq=spec, open_ended=spec)


@dataclass
class ItemDecision:
    """The audit outcome for one (item, backend) pair."""

    item_id: str
    backend_id: str
    protocol: str
    trials: list[Verdict]
    n_correct: int
    label: str
    coverage: str = COVERAGE_EVALUATED
    audit: list[Verdict] = field(default_factory=list)  # pre-escalation originals

    @property
    def is_ta(self) -> bool:
        return self.label == LABEL_TA


def _run_trial(
    variant: QAItem,
    trial_index: int,
    sample_index: int,
    backend: Backend,
    spec: ProtocolSpec,
    templates: TemplateSet,
    refusal_terms: Sequence[str],
) -> tuple[Verdict, list[Verdict]]:
    """Execute one trial; on refusal, optionally escalate to the enhanced
    template once, keeping the refused verdict for the audit trail."""

    def ask(template_name: str) -> Verdict:
        prompt = render_prompt(variant, templates.get(template_name))
        raw = backend.complete(prompt, sample_index=sample_index)
        extracted = extract(raw.text, variant, refusal_terms)
        return Verdict(
            item_id=variant.id,
            backend_id=backend.spec.id,
            protocol=spec.label,
            trial_index=trial_index,
            raw=raw,
            extracted=extracted,
            correct=judge(extracted, variant),
        )

    verdict = ask(spec.template)
    if verdict.refused and spec.escalate_on_refusal and spec.template != "enhanced":
        original = verdict
        verdict = ask("enhanced")
        return verdict, [original]
    return verdict, []


def run_protocol(
    item: QAItem,
    backend: Backend,
    spec: ProtocolSpec,
    templates: TemplateSet | None = None,
    *,
    all_trials: bool = False,
    refusal_terms: Sequence[str] = DEFAULT_REFUSAL_TERMS,
) -> ItemDecision:
    """Run one protocol for one item against one backend.

    Circular stops at the first wrong answer unless all_trials is set; the
    label is identical either way. Any backend error (retries exhausted or a
    permanent failure) marks the item uncovered, which downstream counts as
    a VG vote. Hard harness bugs (unscripted prompts) still propagate.
    """
    templates = templates or TemplateSet.builtin()
    trials: list[Verdict] = []
    audit: list[Verdict] = []

    def decide(label: str) -> ItemDecision:
        return ItemDecision(
            item_id=item.id,
            backend_id=backend.spec.id,
            protocol=spec.label,
            trials=trials,
            n_correct=sum(1 for v in trials if v.correct),
            label=label,
            audit=audit,
        )

    try:
        if spec.kind == "single-pass":
            verdict, extra = _run_trial(
                item, 0, 0, backend, spec, templates, refusal_terms
            )
            trials.append(verdict)
            audit.extend(extra)
            return decide(LABEL_TA if verdict.correct else LABEL_VG)

        if spec.kind == "circular":
            n_eff = (
                min(spec.n_permutations, len(item.options)) if item.is_mcq else 1
            )
            if not item.is_mcq:
                raise ProtocolError(
                    f"item {item.id!r} is open-ended; circular needs options"
                )
            swept = True
            for k in range(n_eff):
                variant = permute_options(item, k)
                verdict, extra = _run_trial(
                    variant, k, 0, backend, spec, templates, refusal_terms
                )
                trials.append(verdict)
                audit.extend(extra)
                if not verdict.correct:
                    swept = False
                    if not all_trials:
                        break
            return decide(LABEL_TA if swept else LABEL_VG)

        # pass-at-k: K independent samples of the unpermuted prompt. All K
        # run regardless of early hits so n_correct feeds the histograms.
        for s in range(spec.k):
            verdict, extra = _run_trial(
                item, s, s, backend, spec, templates, refusal_terms
            )
            trials.append(verdict)
            audit.extend(extra)
        any_correct = any(v.correct for v in trials)
        return decide(LABEL_TA if any_correct else LABEL_VG)

    except BackendError as exc:
        log.warning(
            "item %s on %s uncovered: %s", item.id, backend.spec.id, exc
        )
        return ItemDecision(
            item_id=item.id,
            backend_id=backend.spec.id,
            protocol=spec.label,
            trials=[],
            n_correct=0,
            label=LABEL_VG,
            coverage=COVERAGE_UNCOVERED,
        )


@dataclass
class AuditRunner:
    """One backend plus the protocols its items get."""

    backend: Backend
    assignment: ProtocolAssignment


def run_audit(
    dataset: Dataset,
    runners: Sequence[AuditRunner],
    *,
    templates: TemplateSet | None = None,
    workers: int = 8,
    all_trials: bool = False,
    refusal_terms: Sequence[str] = DEFAULT_REFUSAL_TERMS,
) -> dict[str, list[ItemDecision]]:
    """Audit every item with every backend.

    Backends run one after another, each fanning items out to a bounded
    thread pool; decisions come back in dataset order, so stores written
    from them are deterministic. Completed work is resumed for free through
    the response cache.
    """
    templates = templates or TemplateSet.builtin()
    ids = {runner.backend.spec.id for runner in runners}
    if len(ids) != len(runners):
        raise ProtocolError("duplicate backend ids in audit")

    results: dict[str, list[ItemDecision]] = {}
    for runner in runners:
        spec_id = runner.backend.spec.id

        def decide(item: QAItem, runner: AuditRunner = runner) -> ItemDecision:
            spec = runner.assignment.for_item(item)
            return run_protocol(
                item,
                runner.backend,
                spec,
                templates,
                all_trials=all_trials,
                refusal_terms=refusal_terms,
            )

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            decisions = list(pool.map(decide, dataset.items))
        results[spec_id] = decisions
        log.info(
            "%s: %d items, %d TA, %d uncovered",
            spec_id,
            len(decisions),
            sum(1 for d in decisions if d.is_ta),
            sum(1 for d in decisions if d.coverage == COVERAGE_UNCOVERED),
        )
    return results


def uncovered_fraction(decisions: Sequence[ItemDecision]) -> float:
    if not decisions:
        return 0.0
    return sum(1 for d in decisions if d.coverage == COVERAGE_UNCOVERED) / len(decisions)


def summarize(decisions: Sequence[ItemDecision]) -> dict:
    total = len(decisions)
    ta = sum(1 for d in decisions if d.is_ta)
    uncovered = sum(1 for d in decisions if d.coverage == COVERAGE_UNCOVERED)
    return {
        "total": total,
        "ta": ta,
        "vg": total - ta,
        "uncovered": uncovered,
        "ta_rate": round(ta / total, 4) if total else 0.0,
    }


# --- persistence -----------------------------------------------------------
# Stores must be byte-identical across reruns from the same cache, so
# volatile transport fields (latency, attempt, cached) are never written.


def _extracted_to_record(e: ExtractedAnswer) -> dict:
    return {"kind": e.kind, "letter": e.letter, "text": e.text, "rule": e.rule}


def _verdict_to_record(v: Verdict, include_raw: bool) -> dict:
    record = {
        "trial_index": v.trial_index,
        "correct": v.correct,
        "refused": v.refused,
        "extracted": _extracted_to_record(v.extracted),
        "finish_reason": v.raw.finish_reason,
    }
    if include_raw:
        record["response"] = v.raw.text
    return record


def decision_to_record(d: ItemDecision, include_raw: bool = True) -> dict:
    return {
        "item_id": d.item_id,
        "backend_id": d.backend_id,
        "protocol": d.protocol,
        "label": d.label,
        "coverage": d.coverage,
        "n_correct": d.n_correct,
        "trials": [_verdict_to_record(v, include_raw) for v in d.trials],
        "audit": [_verdict_to_record(v, include_raw) for v in d.audit],
    }


def _verdict_from_record(record: dict, item_id: str, backend_id: str, protocol: str) -> Verdict:
    e = record["extracted"]
    raw = RawResponse(
        text=record.get("response", ""),
        finish_reason=record.get("finish_reason", "stop"),
        latency_s=0.0,
        attempt=0,
        cached=True,
    )
    return Verdict(
        item_id=item_id,
        backend_id=backend_id,
        protocol=protocol,
        trial_index=record["trial_index"],
        raw=raw,
        extracted=ExtractedAnswer(
            kind=e["kind"], letter=e.get("letter"), text=e.get("text"),
            rule=e.get("rule", 0),
        ),
        correct=record["correct"],
    )


def decision_from_record(record: dict) -> ItemDecision:
    common = (record["item_id"], record["backend_id"], record["protocol"])
    return ItemDecision(
        item_id=record["item_id"],
        backend_id=record["backend_id"],
        protocol=record["protocol"],
        trials=[_verdict_from_record(t, *common) for t in record.get("trials", [])],
        n_correct=record["n_correct"],
        label=record["label"],
        coverage=record.get("coverage", COVERAGE_EVALUATED),
        audit=[_verdict_from_record(t, *common) for t in record.get("audit", [])],
    )


def write_decisions(
    path: str | Path, decisions: Sequence[ItemDecision], include_raw: bool = True
) -> Path:
    """Write one canonical-JSON line per decision, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for decision in decisions:
            record = decision_to_record(decision, include_raw)
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True,
                                separators=(",", ":")) + "\n")
    tmp.replace(path)
    return path


def load_decisions(path: str | Path) -> list[ItemDecision]:
    decisions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                decisions.append(decision_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ProtocolError(f"{path}: line {lineno}: bad decision record ({exc})")
    return decisions


# --- presets ---------------------------------------------------------------
# Named protocol suites. Backends in an eval config bind to roles by
# position; the filter threshold is the consensus vote count below which an
# item is retained as visually grounded.


@dataclass(frozen=True)
class Preset:
    name: str
    threshold: int
    roles: tuple[ProtocolAssignment, ...]


def _assignment(mcq: str, open_ended: str) -> ProtocolAssignment:
    return ProtocolAssignment(
        mcq=parse_protocol(mcq, escalate_on_refusal=True),
        open_ended=parse_protocol(open_ended, escalate_on_refusal=True),
    )


PRESETS: Mapping[str, Preset] = {
    "vidground": Preset(
        name="vidground",
        threshold=1,
        roles=(_assignment("single-pass", "single-pass"),),
    ),
    "m1": Preset(
        name="m1",
        threshold=2,
        roles=(
            _assignment("single-pass", "single-pass"),
            _assignment("circular:2", "pass-at-k:10"),
            _assignment("circular:3", "single-pass"),
        ),
    ),
    "m2": Preset(
        name="m2",
        threshold=2,
        roles=(
            _assignment("single-pass", "single-pass"),
            _assignment("circular:4", "pass-at-k:10"),
            _assignment("circular:3", "single-pass"),
        ),
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ProtocolError(
            f"unknown preset {name!r} (have: {', '.join(sorted(PRESETS))})"
        ) from None
