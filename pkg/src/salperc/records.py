"""Rating records and their CSV/JSONL wire formats.

One record is one response: which worker rated which token of which
sentence, the 1..R rating, the completion time, and the covariates the
token was shown with.  The same schema is written by the simulator,
logged by the study service, and read back by the model fitting code.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, TextIO

from .features import VIS_CONDITIONS, TokenContext

# Context fields contribute one column each; display_index is shared
# between the record and its context (asserted equal on write).
CSV_COLUMNS = (
    "worker_id",
    "sentence_id",
    "token_index",
    "rating",
    "completion_time_s",
    "comment",
    "display_index",
    "condition",
    "saliency",
    "word_length",
    "word_frequency",
    "sentence_length",
    "sentiment_polarity",
    "saliency_rank",
    "word_position",
    "capitalization",
    "dependency_relation",
)


@dataclass(frozen=True)
class RatingRecord:
    worker_id: str
    sentence_id: str
    token_index: int
    context: TokenContext
    rating: int
    completion_time_s: float
    comment: str | None = None
    display_index: int = 1
    condition: str = "saliency"

    def __post_init__(self):
        if self.rating < 1:
            raise ValueError(f"rating {self.rating} below 1")
        if self.completion_time_s <= 0:
            raise ValueError(f"completion time {self.completion_time_s} not positive")
        if self.token_index < 1:
            raise ValueError(f"token index {self.token_index} below 1")
        if self.condition not in VIS_CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")

    def to_row(self) -> dict:
        assert self.context.display_index == self.display_index
        row = {
            "worker_id": self.worker_id,
            "sentence_id": self.sentence_id,
            "token_index": self.token_index,
            "rating": self.rating,
            "completion_time_s": repr(self.completion_time_s),
            "comment": self.comment or "",
            "condition": self.condition,
        }
        for name, value in self.context.as_dict().items():
            row[name] = repr(value) if isinstance(value, float) else value
        row["display_index"] = self.display_index
        return row

    @classmethod
    def from_row(cls, row: dict) -> "RatingRecord":
        ctx = TokenContext(
            saliency=float(row["saliency"]),
            word_length=float(row["word_length"]),
            word_frequency=float(row["word_frequency"]),
            sentence_length=float(row["sentence_length"]),
            display_index=float(row["display_index"]),
            sentiment_polarity=float(row["sentiment_polarity"]),
            saliency_rank=float(row["saliency_rank"]),
            word_position=float(row["word_position"]),
            capitalization=row["capitalization"],
            dependency_relation=row["dependency_relation"],
        )
        return cls(
            worker_id=row["worker_id"],
            sentence_id=row["sentence_id"],
            token_index=int(row["token_index"]),
            context=ctx,
            rating=int(row["rating"]),
            completion_time_s=float(row["completion_time_s"]),
            comment=row.get("comment") or None,
            display_index=int(float(row["display_index"])),
            condition=row.get("condition", "saliency"),
        )

    def to_json(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "sentence_id": self.sentence_id,
            "token_index": self.token_index,
            "context": self.context.as_dict(),
            "rating": self.rating,
            "completion_time_s": self.completion_time_s,
            "comment": self.comment,
            "display_index": self.display_index,
            "condition": self.condition,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RatingRecord":
        return cls(
            worker_id=d["worker_id"],
            sentence_id=d["sentence_id"],
            token_index=int(d["token_index"]),
            context=TokenContext.from_dict(d["context"]),
            rating=int(d["rating"]),
            completion_time_s=float(d["completion_time_s"]),
            comment=d.get("comment"),
            display_index=int(d.get("display_index", 1)),
            condition=d.get("condition", "saliency"),
        )


def write_csv(records: Iterable[RatingRecord], out: TextIO, extra: dict | None = None):
    """Write records as CSV.  ``extra`` maps column name to a function
    of the record, appended after the standard columns."""
    extra = extra or {}
    writer = csv.DictWriter(out, fieldnames=list(CSV_COLUMNS) + list(extra))
    writer.writeheader()
    for rec in records:
        row = rec.to_row()
        for name, fn in extra.items():
            row[name] = fn(rec)
        writer.writerow(row)


def read_csv(stream: TextIO) -> list[RatingRecord]:
    return [RatingRecord.from_row(row) for row in csv.DictReader(stream)]


def write_jsonl(records: Iterable[RatingRecord], out: TextIO):
    for rec in records:
        out.write(json.dumps(rec.to_json()) + "\n")


def read_jsonl(stream: TextIO | Iterable[str]) -> Iterator[RatingRecord]:
    for line in stream:
        if line.strip():
            yield RatingRecord.from_json(json.loads(line))


def with_display_index(rec: RatingRecord, display_index: int) -> RatingRecord:
    ctx = replace(rec.context, display_index=float(display_index))
    return replace(rec, display_index=display_index, context=ctx)
