"""Dataset model and JSONL I/O for visual QA corpora.

Items are question/answer records whose media is referenced but never opened;
everything downstream works on the text fields alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

MODALITIES = ("video", "image")

MAX_OPTIONS = 26  # one option per letter A..Z


class DatasetError(ValueError):
    """Raised for malformed dataset files or inconsistent item data.

    When produced by load_dataset, the message aggregates every line-level
    failure so a bad file is reported in one shot.
    """


@dataclass(frozen=True)
class AnswerKey:
    """Gold answer: an option index for MCQ items, free text otherwise."""

    kind: str  # "option-index" | "free-text"
    index: int | None = None
    text: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "option-index":
            if not isinstance(self.index, int) or isinstance(self.index, bool):
                raise DatasetError("option-index answer requires an integer index")
            if self.text is not None:
                raise DatasetError("option-index answer must not carry text")
        elif self.kind == "free-text":
            if not isinstance(self.text, str) or not self.text.strip():
                raise DatasetError("free-text answer requires non-empty text")
            if self.index is not None:
                raise DatasetError("free-text answer must not carry an index")
        else:
            raise DatasetError(f"unknown answer kind: {self.kind!r}")

    @classmethod
    def option(cls, index: int) -> "AnswerKey":
        return cls(kind="option-index", index=index)

    @classmethod
    def free(cls, text: str) -> "AnswerKey":
        return cls(kind="free-text", text=text)


@dataclass(frozen=True)
class QAItem:
    """One question, with options for MCQ items (empty tuple = open-ended).

    media_ref is an opaque pointer to the clip or image; it is carried
    through for provenance but never dereferenced.
    """

    id: str
    question: str
    options: tuple[str, ...]
    gold: AnswerKey
    modality: str
    media_ref: str
    source: str
    meta: Mapping[str, str] = field(default_factory=dict)
    # Original file line, kept so subsets preserve input bytes exactly.
    raw: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("item id must be non-empty")
        if not self.question.strip():
            raise DatasetError("question must be non-empty")
        if self.modality not in MODALITIES:
            raise DatasetError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        n = len(self.options)
        if n == 1 or n > MAX_OPTIONS:
            raise DatasetError(f"option count must be 0 or 2..{MAX_OPTIONS}, got {n}")
        if any(not isinstance(o, str) or not o.strip() for o in self.options):
            raise DatasetError("options must be non-empty strings")
        if n:
            if self.gold.kind != "option-index":
                raise DatasetError("MCQ item requires an option-index gold answer")
            assert self.gold.index is not None
            if not 0 <= self.gold.index < n:
                raise DatasetError(
                    f"gold index {self.gold.index} out of range for {n} options"
                )
        else:
            if self.gold.kind != "free-text":
                raise DatasetError("open-ended item requires a free-text gold answer")
        if not all(
            isinstance(k, str) and isinstance(v, str) for k, v in self.meta.items()
        ):
            raise DatasetError("meta must map strings to strings")

    @property
    def is_mcq(self) -> bool:
        return bool(self.options)


@dataclass
class DatasetCounts:
    total: int
    mcq: int
    open_ended: int
    video: int
    image: int


@dataclass
class Dataset:
    """An ordered, immutable-after-load collection of QAItems with unique ids."""

    name: str
    items: list[QAItem]

    def __post_init__(self) -> None:
        self._by_id: dict[str, QAItem] = {}
        for item in self.items:
            if item.id in self._by_id:
                raise DatasetError(f"duplicate item id: {item.id!r}")
            self._by_id[item.id] = item

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def get(self, item_id: str) -> QAItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise DatasetError(f"unknown item id: {item_id!r}") from None

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    @property
    def ids(self) -> list[str]:
        return [item.id for item in self.items]

    def counts(self) -> DatasetCounts:
        mcq = sum(1 for i in self.items if i.is_mcq)
        video = sum(1 for i in self.items if i.modality == "video")
        return DatasetCounts(
            total=len(self.items),
            mcq=mcq,
            open_ended=len(self.items) - mcq,
            video=video,
            image=len(self.items) - video,
        )


def _item_from_record(record: dict, raw: str | None = None) -> QAItem:
    if not isinstance(record, dict):
        raise DatasetError("record must be a JSON object")
    required = ("id", "question", "answer", "modality", "media_ref", "source")
    missing = [k for k in required if k not in record]
    if missing:
        raise DatasetError(f"missing fields: {', '.join(missing)}")

    options_field = record.get("options", [])
    if not isinstance(options_field, list):
        raise DatasetError("options must be a list of strings")
    options = tuple(options_field)

    answer = record["answer"]
    if options:
        if not isinstance(answer, int) or isinstance(answer, bool):
            raise DatasetError("answer must be an option index when options are present")
        gold = AnswerKey.option(answer)
    else:
        if not isinstance(answer, str):
            raise DatasetError("answer must be a string for open-ended items")
        gold = AnswerKey.free(answer)

    for key in ("id", "question", "modality", "media_ref", "source"):
        if not isinstance(record[key], str):
            raise DatasetError(f"field {key!r} must be a string")

    meta = record.get("meta", {})
    if not isinstance(meta, dict):
        raise DatasetError("meta must be an object")

    return QAItem(
        id=record["id"],
        question=record["question"],
        options=options,
        gold=gold,
        modality=record["modality"],
        media_ref=record["media_ref"],
        source=record["source"],
        meta=meta,
        raw=raw,
    )


def load_dataset(path: str | Path, format: str = "jsonl") -> Dataset:
    """Load and validate a dataset file.

    All line-level problems (bad JSON, schema violations, duplicate ids,
    out-of-range gold indices) are collected and raised together, each
    prefixed with its 1-based line number.
    """
    if format != "jsonl":
        raise DatasetError(f"unsupported dataset format: {format!r}")
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")

    items: list[QAItem] = []
    seen: dict[str, int] = {}
    errors: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                record = json.loads(stripped)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
                continue
            try:
                item = _item_from_record(record, raw=stripped)
            except DatasetError as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            if item.id in seen:
                errors.append(
                    f"line {lineno}: duplicate id {item.id!r} (first seen line {seen[item.id]})"
                )
                continue
            seen[item.id] = lineno
            items.append(item)

    if errors:
        raise DatasetError(
            f"{path}: {len(errors)} invalid line(s)\n" + "\n".join(errors)
        )
    if not items:
        raise DatasetError(f"{path}: dataset is empty")
    return Dataset(name=path.stem, items=items)


def item_to_record(item: QAItem) -> dict:
    """Serialize an item back to the on-disk schema."""
    record: dict = {"id": item.id, "question": item.question}
    if item.options:
        record["options"] = list(item.options)
        record["answer"] = item.gold.index
    else:
        record["answer"] = item.gold.text
    record["modality"] = item.modality
    record["media_ref"] = item.media_ref
    record["source"] = item.source
    if item.meta:
        record["meta"] = dict(item.meta)
    return record


@dataclass
class SubsetResult:
    path: Path
    total: int
    kept: int

    @property
    def retention(self) -> float:
        """Kept fraction, rounded to 3 decimals."""
        return round(self.kept / self.total, 3) if self.total else 0.0


def write_subset(dataset: Dataset, keep: Iterable[str], out_path: str | Path) -> SubsetResult:
    """Write the items whose ids are in `keep`, preserving dataset order.

    Items loaded from a file are written back byte-for-byte from their
    original lines; programmatically built items are serialized fresh.
    """
    keep = set(keep)
    unknown = keep - set(dataset.ids)
    if unknown:
        sample = ", ".join(sorted(unknown)[:5])
        raise DatasetError(f"{len(unknown)} unknown id(s) in keep set: {sample}")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    kept = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        for item in dataset.items:
            if item.id not in keep:
                continue
            line = item.raw if item.raw is not None else json.dumps(
                item_to_record(item), ensure_ascii=False
            )
            fh.write(line + "\n")
            kept += 1
    tmp.replace(out_path)
    return SubsetResult(path=out_path, total=len(dataset), kept=kept)
