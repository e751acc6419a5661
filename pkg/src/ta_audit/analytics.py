"""Aggregate views over decision stores and external result logs.

All code here is pure computation over in-memory records; rendering (tables,
figures) happens at the CLI layer. Percentages are rounded to one decimal
only at serialization time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Collection, Mapping, Sequence

from .corpus import Dataset
from .protocols import COVERAGE_UNCOVERED, LABEL_TA, LABEL_VG, ItemDecision


class AnalyticsError(ValueError):
    pass


def pct(fraction: float) -> float:
    """Fraction -> percentage with the 1-decimal rounding used in reports."""
    return round(100.0 * fraction, 1)


def ta_ids(decisions: Sequence[ItemDecision]) -> set[str]:
    return {d.item_id for d in decisions if d.label == LABEL_TA}


def vg_ids(decisions: Sequence[ItemDecision]) -> set[str]:
    return {d.item_id for d in decisions if d.label == LABEL_VG}


def random_baseline(dataset: Dataset) -> float:
    """Expected accuracy of uniform guessing: 1/|options| per MCQ item,
    zero credit for open-ended."""
    if not len(dataset):
        raise AnalyticsError("empty dataset")
    total = sum(1.0 / len(item.options) for item in dataset if item.is_mcq)
    return total / len(dataset)


@dataclass
class TARateReport:
    backend_id: str
    total: int
    ta: int
    vg: int
    uncovered: int
    baseline: float | None = None

    @property
    def ta_rate(self) -> float:
        return self.ta / self.total if self.total else 0.0

    @property
    def delta(self) -> float | None:
        if self.baseline is None:
            return None
        return self.ta_rate - self.baseline

    def to_dict(self) -> dict:
        out = {
            "backend_id": self.backend_id,
            "total": self.total,
            "ta": self.ta,
            "vg": self.vg,
            "uncovered": self.uncovered,
            "ta_rate_pct": pct(self.ta_rate),
        }
        if self.baseline is not None:
            out["baseline_pct"] = pct(self.baseline)
            out["delta_pct"] = round(out["ta_rate_pct"] - out["baseline_pct"], 1)
        return out


def ta_rate(
    decisions: Sequence[ItemDecision],
    baseline: float | None = None,
    dataset: Dataset | None = None,
) -> TARateReport:
    """TA rate of one decision store, with an optional baseline delta.

    Pass a constant baseline, or a dataset to compute the uniform-guess
    baseline from; with neither there is simply no delta column.
    """
    if not decisions:
        raise AnalyticsError("empty decision store")
    if baseline is None and dataset is not None:
        baseline = random_baseline(dataset)
    backend_ids = {d.backend_id for d in decisions}
    if len(backend_ids) != 1:
        raise AnalyticsError(f"mixed backends in one store: {sorted(backend_ids)}")
    ta = sum(1 for d in decisions if d.label == LABEL_TA)
    uncovered = sum(1 for d in decisions if d.coverage == COVERAGE_UNCOVERED)
    return TARateReport(
        backend_id=backend_ids.pop(),
        total=len(decisions),
        ta=ta,
        vg=len(decisions) - ta,
        uncovered=uncovered,
        baseline=baseline,
    )


@dataclass
class AgreementReport:
    """Pairwise Jaccard and exact membership cells for 2 or 3 id sets."""

    names: tuple[str, ...]
    sizes: dict[str, int]
    jaccard: dict[str, float]  # "name1+name2" -> |A&B| / |A|B|
    cells: dict[str, int]  # "name1+name2" -> exactly-these count; "none" cell too
    universe: int

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "universe": self.universe,
            "sizes": self.sizes,
            "jaccard_pct": {k: pct(v) for k, v in self.jaccard.items()},
            "cells": self.cells,
            "cells_pct": {k: pct(v / self.universe) for k, v in self.cells.items()},
        }


def agreement(
    sets: Mapping[str, Collection[str]], universe: Collection[str]
) -> AgreementReport:
    """Overlap structure of 2 or 3 labeled id sets within a universe.

    Cells partition the universe by exact membership pattern (inclusion-
    exclusion over the input sets), so cell counts always sum to |universe|.
    """
    if len(sets) not in (2, 3):
        raise AnalyticsError(f"agreement needs 2 or 3 sets, got {len(sets)}")
    universe = set(universe)
    if not universe:
        raise AnalyticsError("empty universe")
    as_sets = {name: set(ids) for name, ids in sets.items()}
    for name, ids in as_sets.items():
        stray = ids - universe
        if stray:
            sample = ", ".join(sorted(stray)[:5])
            raise AnalyticsError(
                f"set {name!r} has {len(stray)} id(s) outside the dataset: {sample}"
            )

    names = tuple(sets.keys())
    jaccard = {}
    for a, b in combinations(names, 2):
        union = as_sets[a] | as_sets[b]
        jaccard[f"{a}+{b}"] = (
            len(as_sets[a] & as_sets[b]) / len(union) if union else 0.0
        )

    cells: dict[str, int] = {}
    remaining = len(universe)
    # Iterate non-empty membership patterns; each id lands in exactly one.
    for r in range(len(names), 0, -1):
        for members in combinations(names, r):
            cell = set.intersection(*(as_sets[m] for m in members))
            for other in names:
                if other not in members:
                    cell -= as_sets[other]
            key = "+".join(members)
            cells[key] = len(cell)
            remaining -= len(cell)
    cells["none"] = remaining

    return AgreementReport(
        names=names,
        sizes={name: len(as_sets[name]) for name in names},
        jaccard=jaccard,
        cells=cells,
        universe=len(universe),
    )


@dataclass
class PassKSplit:
    n: int
    bins: list[int]  # index = number of correct samples, 0..k

    @property
    def zero(self) -> float:
        return self.bins[0] / self.n if self.n else 0.0

    @property
    def all(self) -> float:
        return self.bins[-1] / self.n if self.n else 0.0

    @property
    def nonzero(self) -> float:
        return 1.0 - self.zero if self.n else 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "bins": self.bins,
            "pct_zero": pct(self.zero),
            "pct_all": pct(self.all),
            "pct_nonzero": pct(self.nonzero),
        }


@dataclass
class PassKReport:
    k: int
    overall: PassKSplit
    by_modality: dict[str, PassKSplit]
    uncovered: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "uncovered": self.uncovered,
            "overall": self.overall.to_dict(),
            "by_modality": {m: s.to_dict() for m, s in self.by_modality.items()},
        }


def _passk_k(protocol: str) -> int | None:
    if protocol.startswith("pass-at-k:"):
        return int(protocol.split(":", 1)[1])
    return None


def passk_histogram(
    decisions: Sequence[ItemDecision], dataset: Dataset
) -> PassKReport:
    """Distribution of per-item correct-sample counts under pass-at-k.

    Only evaluated pass-at-k decisions contribute; uncovered ones are
    reported as a count. All decisions must share one K.
    """
    ks = set()
    rows: list[tuple[str, int]] = []
    uncovered = 0
    for d in decisions:
        k = _passk_k(d.protocol)
        if k is None:
            continue
        ks.add(k)
        if d.coverage == COVERAGE_UNCOVERED:
            uncovered += 1
            continue
        rows.append((d.item_id, d.n_correct))
    if not ks:
        raise AnalyticsError("no pass-at-k decisions found")
    if len(ks) != 1:
        raise AnalyticsError(f"mixed K values in one store: {sorted(ks)}")
    k = ks.pop()

    overall = [0] * (k + 1)
    by_modality: dict[str, list[int]] = {"video": [0] * (k + 1), "image": [0] * (k + 1)}
    for item_id, n_correct in rows:
        item = dataset.get(item_id)  # raises for ids outside the dataset
        if not 0 <= n_correct <= k:
            raise AnalyticsError(
                f"item {item_id!r}: n_correct {n_correct} outside 0..{k}"
            )
        overall[n_correct] += 1
        by_modality[item.modality][n_correct] += 1

    return PassKReport(
        k=k,
        overall=PassKSplit(n=len(rows), bins=overall),
        by_modality={
            m: PassKSplit(n=sum(bins), bins=bins) for m, bins in by_modality.items()
        },
        uncovered=uncovered,
    )


# --- external result logs ----------------------------------------------------

MODES = ("with_video", "text_only")


@dataclass(frozen=True)
class ResultRecord:
    item_id: str
    model: str
    frames: int | None
    mode: str
    correct: bool


def load_result_log(path: str | Path) -> list[ResultRecord]:
    """Read a result-log JSONL file, validating line by line."""
    path = Path(path)
    records = []
    errors = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                mode = data["mode"]
                if mode not in MODES:
                    raise ValueError(f"mode must be one of {MODES}")
                frames = data.get("frames")
                if frames is not None and (not isinstance(frames, int) or frames < 1):
                    raise ValueError("frames must be a positive integer or null")
                if not isinstance(data["correct"], bool):
                    raise ValueError("correct must be a boolean")
                records.append(
                    ResultRecord(
                        item_id=str(data["item_id"]),
                        model=str(data["model"]),
                        frames=frames,
                        mode=mode,
                        correct=data["correct"],
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise AnalyticsError(f"{path}: " + "; ".join(errors))
    if not records:
        raise AnalyticsError(f"{path}: no records")
    return records


def _accuracy(records: Sequence[ResultRecord]) -> float | None:
    if not records:
        return None
    return sum(r.correct for r in records) / len(records)


@dataclass
class VideoScoreRow:
    frames: int | None
    n_full: int
    n_vg: int
    acc_full: float | None
    acc_vg: float | None
    gain_full: float | None
    gain_vg: float | None


@dataclass
class ModelScores:
    model: str
    text_only_n: int
    text_only_acc: float | None
    text_only_n_vg: int
    text_only_acc_vg: float | None
    with_video: list[VideoScoreRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        def p(x: float | None) -> float | None:
            return None if x is None else pct(x)

        return {
            "model": self.model,
            "text_only": {
                "n": self.text_only_n,
                "acc_pct": p(self.text_only_acc),
                "n_vg": self.text_only_n_vg,
                "acc_vg_pct": p(self.text_only_acc_vg),
            },
            "with_video": [
                {
                    "frames": row.frames,
                    "n": row.n_full,
                    "acc_pct": p(row.acc_full),
                    "gain_pct": p(row.gain_full),
                    "n_vg": row.n_vg,
                    "acc_vg_pct": p(row.acc_vg),
                    "gain_vg_pct": p(row.gain_vg),
                }
                for row in self.with_video
            ],
        }


@dataclass
class ScoreReport:
    models: list[ModelScores]

    def to_dict(self) -> dict:
        return {"models": [m.to_dict() for m in self.models]}


def decompose_scores(
    records: Sequence[ResultRecord], vg_ids: Collection[str]
) -> ScoreReport:
    """Split benchmark accuracy into text-only and visual components.

    For each model: text-only accuracy, with-video accuracy per frame count,
    and their difference (the visual gain), on the full item set and again
    restricted to the visually grounded subset.
    """
    if not records:
        raise AnalyticsError("no result records")
    vg = set(vg_ids)
    if not vg & {r.item_id for r in records}:
        raise AnalyticsError("VG id set does not intersect the result log")

    models = sorted({r.model for r in records})
    out = []
    for model in models:
        mine = [r for r in records if r.model == model]
        text = [r for r in mine if r.mode == "text_only"]
        text_vg = [r for r in text if r.item_id in vg]
        scores = ModelScores(
            model=model,
            text_only_n=len(text),
            text_only_acc=_accuracy(text),
            text_only_n_vg=len(text_vg),
            text_only_acc_vg=_accuracy(text_vg),
        )
        frame_counts = sorted(
            {r.frames for r in mine if r.mode == "with_video"},
            key=lambda f: (f is None, f),
        )
        for frames in frame_counts:
            video = [r for r in mine if r.mode == "with_video" and r.frames == frames]
            video_vg = [r for r in video if r.item_id in vg]
            acc_full = _accuracy(video)
            acc_vg = _accuracy(video_vg)
            scores.with_video.append(
                VideoScoreRow(
                    frames=frames,
                    n_full=len(video),
                    n_vg=len(video_vg),
                    acc_full=acc_full,
                    acc_vg=acc_vg,
                    gain_full=(
                        acc_full - scores.text_only_acc
                        if acc_full is not None and scores.text_only_acc is not None
                        else None
                    ),
                    gain_vg=(
                        acc_vg - scores.text_only_acc_vg
                        if acc_vg is not None and scores.text_only_acc_vg is not None
                        else None
                    ),
                )
            )
        out.append(scores)
    return ScoreReport(models=out)


def frame_indices(total_frames: int, n: int) -> list[int]:
    """Centers of n equal spans over [0, total_frames): floor((i+0.5)*T/N).

    Duplicates appear when n exceeds the frame count; indices are clamped
    into range either way.
    """
    if total_frames < 1:
        raise AnalyticsError("total_frames must be >= 1")
    if n < 1:
        raise AnalyticsError("n must be >= 1")
    return [
        min(total_frames - 1, int((i + 0.5) * total_frames / n)) for i in range(n)
    ]


def format_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Fixed-width text table; numbers are rendered right-aligned."""
    cells = [[("" if v is None else str(v)) for v in row] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]

    def fmt(row: Sequence[str]) -> str:
        return "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))

    lines = [fmt(list(headers)), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in cells)
    return "\n".join(lines)
