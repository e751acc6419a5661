"""Figure rendering for report output.

Everything draws to files through the Agg backend; nothing here opens a
window. Analytics stays import-clean of matplotlib; only the CLI report path
pulls this module in.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Circle

from .analytics import (
    AgreementReport,
    PassKReport,
    ScoreReport,
    TARateReport,
    pct,
)

GOLDEN = (1 + 5 ** 0.5) / 2


def _figure(width: float = 7.0) -> tuple:
    return plt.subplots(figsize=(width, width / GOLDEN))


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def save_ta_rate_figure(reports: Sequence[TARateReport], path: str | Path) -> Path:
    fig, ax = _figure()
    names = [r.backend_id for r in reports]
    rates = [pct(r.ta_rate) for r in reports]
    bars = ax.bar(names, rates, color="#4878a8")
    ax.bar_label(bars, fmt="%.1f")
    baselines = [r.baseline for r in reports if r.baseline is not None]
    if baselines:
        ax.axhline(pct(baselines[0]), color="#b04a4a", linestyle="--",
                   label=f"baseline {pct(baselines[0])}%")
        ax.legend()
    ax.set_ylabel("text-only answerable (%)")
    ax.set_ylim(0, 100)
    ax.set_title("TA rate by backend")
    return _finish(fig, path)


def save_passk_figure(report: PassKReport, path: str | Path) -> Path:
    fig, ax = _figure()
    k = report.k
    xs = list(range(k + 1))
    width = 0.27
    series = [("overall", report.overall, "#4878a8")]
    for name, color in (("video", "#5a9e6f"), ("image", "#c08a3e")):
        split = report.by_modality.get(name)
        if split and split.n:
            series.append((name, split, color))
    for offset, (name, split, color) in enumerate(series):
        shift = (offset - (len(series) - 1) / 2) * width
        shares = [100.0 * b / split.n if split.n else 0.0 for b in split.bins]
        ax.bar([x + shift for x in xs], shares, width=width, label=name, color=color)
    ax.set_xticks(xs)
    ax.set_xlabel(f"correct samples out of {k}")
    ax.set_ylabel("share of items (%)")
    ax.set_title(
        f"pass-at-{k}: zero {pct(report.overall.zero)}%, "
        f"nonzero {pct(report.overall.nonzero)}%, all {pct(report.overall.all)}%"
    )
    ax.legend()
    return _finish(fig, path)


# Fixed geometry for two- and three-circle overlap diagrams; counts go at
# precomputed anchor points per membership pattern.
_TWO_CENTERS = ((-0.45, 0.0), (0.45, 0.0))
_TWO_ANCHORS = {(True, False): (-0.85, 0.0), (False, True): (0.85, 0.0),
                (True, True): (0.0, 0.0)}
_THREE_CENTERS = ((-0.45, -0.26), (0.45, -0.26), (0.0, 0.52))
_THREE_ANCHORS = {
    (True, False, False): (-0.85, -0.55),
    (False, True, False): (0.85, -0.55),
    (False, False, True): (0.0, 1.05),
    (True, True, False): (0.0, -0.45),
    (True, False, True): (-0.5, 0.35),
    (False, True, True): (0.5, 0.35),
    (True, True, True): (0.0, 0.0),
}


def save_agreement_figure(report: AgreementReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7.0, 6.2))
    names = report.names
    centers = _TWO_CENTERS if len(names) == 2 else _THREE_CENTERS
    anchors = _TWO_ANCHORS if len(names) == 2 else _THREE_ANCHORS
    colors = ("#4878a8", "#5a9e6f", "#c08a3e")
    for (x, y), name, color in zip(centers, names, colors):
        ax.add_patch(Circle((x, y), 0.75, alpha=0.35, color=color))
        label_y = y - 0.92 if y <= 0 else y + 0.92
        ax.text(x * 1.45, label_y, f"{name}\n({report.sizes[name]:,})",
                ha="center", va="center", fontsize=10)
    for pattern, (x, y) in anchors.items():
        members = tuple(n for n, inside in zip(names, pattern) if inside)
        count = report.cells.get("+".join(members), 0)
        ax.text(x, y, f"{count:,}", ha="center", va="center", fontsize=9)
    none = report.cells.get("none", 0)
    jaccard = ", ".join(f"{k}: {pct(v)}%" for k, v in report.jaccard.items())
    ax.set_title(f"set overlap (outside all: {none:,})\nJaccard {jaccard}", fontsize=10)
    ax.set_xlim(-1.7, 1.7)
    ax.set_ylim(-1.6, 1.8)
    ax.set_aspect("equal")
    ax.axis("off")
    return _finish(fig, path)


def save_scores_figure(report: ScoreReport, path: str | Path) -> Path:
    fig, ax = _figure()
    labels: list[str] = []
    text_bars: list[float] = []
    gain_bars: list[float] = []
    for model in report.models:
        for row in model.with_video:
            if row.acc_full is None or model.text_only_acc is None:
                continue
            frames = f"@{row.frames}f" if row.frames else ""
            labels.append(f"{model.model}{frames}")
            text_bars.append(pct(model.text_only_acc))
            gain_bars.append(pct(row.acc_full) - pct(model.text_only_acc))
    xs = range(len(labels))
    ax.bar(xs, text_bars, color="#8a8a8a", label="text only")
    ax.bar(xs, gain_bars, bottom=text_bars, color="#5a9e6f", label="visual gain")
    for x, (base, gain) in enumerate(zip(text_bars, gain_bars)):
        ax.text(x, base + gain + 1, f"+{gain:.1f}", ha="center", fontsize=9)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("score decomposition: text-only floor and visual gain")
    ax.legend()
    return _finish(fig, path)
