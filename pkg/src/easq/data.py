"""Columnar event logs, the item catalog, feature encoding and JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError
from .losses import DISSATISFIED, LABEL_VALUE, NONE, SATISFIED, UNCERTAIN, behavior_score
from .model import EasqConfig, encode_ids
from .simenv import InteractionEvent, QuestionnaireResponse, World

ANSWERS = (SATISFIED, DISSATISFIED, UNCERTAIN, NONE)

INTERACTION_FIELDS = {
    "ts": float, "user_id": int, "item_id": int, "watch_time_s": float, "duration_s": float,
    "progress": float, "like": bool, "follow": bool, "comment": bool, "forward": bool,
}
QUESTIONNAIRE_FIELDS = {
    "ts": float, "user_id": int, "item_id": int, "exposed": bool, "clicked": bool, "answer": str,
}


@dataclass
class Catalog:
    """Item-side metadata known before any view: category and duration."""
    category: np.ndarray
    duration: np.ndarray
    duration_edges: np.ndarray

    @classmethod
    def from_world(cls, world: World, n_buckets: int = 8) -> "Catalog":
        return cls(world.category.copy(), world.duration.copy(),
                   duration_edges(5.0, 120.0, n_buckets))

    @property
    def n_items(self) -> int:
        return len(self.category)

    def to_dict(self) -> dict:
        return {"item_category": self.category.tolist(),
                "item_duration_s": self.duration.tolist(),
                "duration_edges": self.duration_edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(np.asarray(d["item_category"], dtype=np.int64),
                   np.asarray(d["item_duration_s"], dtype=float),
                   np.asarray(d["duration_edges"], dtype=float))


def duration_edges(low: float, high: float, n_buckets: int) -> np.ndarray:
    """Inner log-spaced cut points; ``n_buckets - 1`` of them."""
    return np.geomspace(low, high, n_buckets + 1)[1:-1]


@dataclass
class EventLog:
    ts: np.ndarray
    user: np.ndarray
    item: np.ndarray
    watch_time: np.ndarray
    duration: np.ndarray
    progress: np.ndarray
    like: np.ndarray
    follow: np.ndarray
    comment: np.ndarray
    forward: np.ndarray
    answer: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    def take(self, rows) -> "EventLog":
        return EventLog(**{f.name: getattr(self, f.name)[rows] for f in fields(self)})

    def behavior(self) -> np.ndarray:
        return behavior_score(self.progress, self.like, self.follow, self.comment, self.forward)

    def n_answered(self) -> int:
        return int(np.isin(self.answer, list(LABEL_VALUE)).sum())

    @classmethod
    def from_records(cls, events: list[InteractionEvent],
                     responses: Iterable[QuestionnaireResponse] = ()) -> "EventLog":
        order = sorted(range(len(events)),
                       key=lambda k: (events[k].ts, events[k].user_id, events[k].item_id))
        ev = [events[k] for k in order]
        index = {(e.user_id, e.item_id, e.ts): k for k, e in enumerate(ev)}
        answer = np.full(len(ev), NONE, dtype=object)
        for r in responses:
            if r.answer == NONE:
                continue
            k = index.get((r.user_id, r.item_id, r.ts))
            if k is None:
                raise DataError(f"response for user {r.user_id} item {r.item_id} at ts {r.ts} "
                                "matches no interaction")
            answer[k] = r.answer
        return cls(
            ts=np.array([e.ts for e in ev], dtype=float),
            user=np.array([e.user_id for e in ev], dtype=np.int64),
            item=np.array([e.item_id for e in ev], dtype=np.int64),
            watch_time=np.array([e.watch_time for e in ev], dtype=float),
            duration=np.array([e.duration for e in ev], dtype=float),
            progress=np.array([e.progress for e in ev], dtype=float),
            like=np.array([e.like for e in ev], dtype=bool),
            follow=np.array([e.follow for e in ev], dtype=bool),
            comment=np.array([e.comment for e in ev], dtype=bool),
            forward=np.array([e.forward for e in ev], dtype=bool),
            answer=answer,
        )


def time_split(log: EventLog, train_fraction: float = 0.8) -> tuple[EventLog, EventLog]:
    """Chronological split: the last ``1 - train_fraction`` of events by timestamp."""
    n_train = int(np.floor(len(log) * train_fraction))
    if n_train == len(log):
        return log, log.take(slice(len(log), len(log)))
    cutoff = log.ts[n_train]
    train = log.ts < cutoff
    return log.take(np.nonzero(train)[0]), log.take(np.nonzero(~train)[0])


def batches(log: EventLog, batch_size: int) -> Iterator[EventLog]:
    for start in range(0, len(log), batch_size):
        yield log.take(slice(start, start + batch_size))


def encode_features(config: EasqConfig, catalog: Catalog, users, items, ts) -> dict[str, np.ndarray]:
    """Table-row indices for every embedding field."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ts = np.asarray(ts, dtype=float)
    known = (items >= 0) & (items < catalog.n_items)
    safe = np.where(known, items, 0)
    category = np.where(known, catalog.category[safe], -1)
    bucket = np.where(known, np.digitize(catalog.duration[safe], catalog.duration_edges), -1)
    hour = (np.floor(ts / 3600.0).astype(np.int64)) % 24
    return {
        "user_id": encode_ids(users, config.vocab("user_id")),
        "item_id": encode_ids(items, config.vocab("item_id")),
        "item_category": encode_ids(category, config.vocab("item_category")),
        "hour": encode_ids(hour, config.vocab("hour")),
        "duration_bucket": encode_ids(bucket, config.vocab("duration_bucket")),
    }


def log_features(config: EasqConfig, catalog: Catalog, log: EventLog) -> dict[str, np.ndarray]:
    return encode_features(config, catalog, log.user, log.item, log.ts)


# -- JSONL -----------------------------------------------------------------

def event_row(e: InteractionEvent, debug: bool = False) -> dict:
    row = {"ts": e.ts, "user_id": e.user_id, "item_id": e.item_id,
           "watch_time_s": e.watch_time, "duration_s": e.duration, "progress": e.progress,
           "like": e.like, "follow": e.follow, "comment": e.comment, "forward": e.forward}
    if debug:
        row["s_true"] = e.s_true
    return row


def response_row(r: QuestionnaireResponse) -> dict:
    return {"ts": r.ts, "user_id": r.user_id, "item_id": r.item_id,
            "exposed": r.exposed, "clicked": r.clicked, "answer": r.answer}


def write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def _check_row(row, schema: dict, path: Path, lineno: int) -> None:
    if not isinstance(row, dict):
        raise DataError(f"{path}:{lineno}: expected an object")
    for key, typ in schema.items():
        if key not in row:
            raise DataError(f"{path}:{lineno}: missing field {key!r}")
        v = row[key]
        ok = (isinstance(v, bool) if typ is bool
              else isinstance(v, int) and not isinstance(v, bool) if typ is int
              else isinstance(v, (int, float)) and not isinstance(v, bool) if typ is float
              else isinstance(v, typ))
        if not ok:
            raise DataError(f"{path}:{lineno}: field {key!r} should be {typ.__name__}, got {v!r}")


def _read_jsonl(path: Path, schema: dict) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from None
            _check_row(row, schema, path, lineno)
            yield lineno, row


def read_interactions(path: Path) -> list[InteractionEvent]:
    out = []
    for _, row in _read_jsonl(path, INTERACTION_FIELDS):
        out.append(InteractionEvent(
            float(row["ts"]), row["user_id"], row["item_id"], float(row["watch_time_s"]),
            float(row["duration_s"]), float(row["progress"]), row["like"], row["follow"],
            row["comment"], row["forward"], float(row.get("s_true", float("nan")))))
    return out


def read_questionnaire(path: Path) -> list[QuestionnaireResponse]:
    out = []
    for lineno, row in _read_jsonl(path, QUESTIONNAIRE_FIELDS):
        answer = row["answer"]
        if answer not in ANSWERS:
            raise DataError(f"{path}:{lineno}: unknown answer {answer!r}")
        if (answer != NONE) != (row["exposed"] and row["clicked"]):
            raise DataError(f"{path}:{lineno}: answer {answer} inconsistent with "
                            "exposed/clicked")
        out.append(QuestionnaireResponse(float(row["ts"]), row["user_id"], row["item_id"],
                                         row["exposed"], row["clicked"], answer))
    return out
