"""Feature vocabularies, impression logs and per-position behavior sequences.

File formats (UTF-8, tab-separated, one header row):

impressions:
    request_id  day  traffic  user_id  segment  query  geo  hour  dow
    item_id  category  position  bid  click  ts

behaviors (one row per historical click):
    user_id  ts  position  item_id  category  query  geo  hour  dow

Tokens are arbitrary strings; integer ids are assigned per field with id 0
reserved for unknown/padding. Time differences are bucketed into 16
logarithmic minute buckets.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, UsageError

IMPRESSION_COLUMNS = (
    "request_id",
    "day",
    "traffic",
    "user_id",
    "segment",
    "query",
    "geo",
    "hour",
    "dow",
    "item_id",
    "category",
    "position",
    "bid",
    "click",
    "ts",
)

BEHAVIOR_COLUMNS = ("user_id", "ts", "position", "item_id", "category", "query", "geo", "hour", "dow")

USER_FIELDS = ("user_id", "segment")
CONTEXT_FIELDS = ("query", "geo", "hour", "dow")
ITEM_FIELDS = ("item_id", "category")
VOCAB_FIELDS = USER_FIELDS + CONTEXT_FIELDS + ITEM_FIELDS

TRAFFIC_KINDS = ("regular", "randomized")

TIME_BUCKETS = 16


@dataclass
class RawImpression:
    """One displayed item exactly as logged (string tokens)."""

    request_id: str
    day: int
    traffic: str
    user_id: str
    segment: str
    query: str
    geo: str
    hour: str
    dow: str
    item_id: str
    category: str
    position: int
    bid: float
    click: int
    ts: int

    def to_row(self) -> str:
        return "\t".join(
            (
                self.request_id,
                str(self.day),
                self.traffic,
                self.user_id,
                self.segment,
                self.query,
                self.geo,
                self.hour,
                self.dow,
                self.item_id,
                self.category,
                str(self.position),
                repr(self.bid),
                str(self.click),
                str(self.ts),
            )
        )


@dataclass
class RawBehavior:
    """One historical click exactly as logged (string tokens)."""

    user_id: str
    ts: int
    position: int
    item_id: str
    category: str
    query: str
    geo: str
    hour: str
    dow: str

    def to_row(self) -> str:
        return "\t".join(
            (
                self.user_id,
                str(self.ts),
                str(self.position),
                self.item_id,
                self.category,
                self.query,
                self.geo,
                self.hour,
                self.dow,
            )
        )


class Vocabulary:
    """Per-field token -> dense id maps; id 0 is unknown/padding everywhere."""

    def __init__(self, min_count: int = 1):
        self.min_count = min_count
        self._maps: dict[str, dict[str, int]] = {f: {} for f in VOCAB_FIELDS}

    def size(self, field_name: str) -> int:
        return len(self._field(field_name)) + 1

    def encode(self, field_name: str, token: str) -> int:
        return self._field(field_name).get(token, 0)

    def decode(self, field_name: str, idx: int) -> str | None:
        """Inverse of encode; None for the unknown id 0."""
        for token, i in self._field(field_name).items():
            if i == idx:
                return token
        return None

    def _field(self, field_name: str) -> dict[str, int]:
        if field_name not in self._maps:
            raise UsageError(f"unknown vocabulary field {field_name!r}")
        return self._maps[field_name]

    @classmethod
    def build(cls, impressions: Iterable[RawImpression], min_count: int = 1) -> "Vocabulary":
        """Assign ids in first-seen order to tokens occurring >= min_count times."""
        counts: dict[str, dict[str, int]] = {f: {} for f in VOCAB_FIELDS}
        order: dict[str, list[str]] = {f: [] for f in VOCAB_FIELDS}
        for imp in impressions:
            for f in VOCAB_FIELDS:
                token = getattr(imp, f)
                bucket = counts[f]
                if token not in bucket:
                    bucket[token] = 0
                    order[f].append(token)
                bucket[token] += 1
        vocab = cls(min_count=min_count)
        for f in VOCAB_FIELDS:
            next_id = 1
            for token in order[f]:
                if counts[f][token] >= min_count:
                    vocab._maps[f][token] = next_id
                    next_id += 1
        return vocab


@dataclass
class Impression:
    """An encoded impression: every token replaced by its vocabulary id."""

    request_id: str
    day: int
    traffic: str
    user_ids: tuple[int, int]
    context_ids: tuple[int, int, int, int]
    item_ids: tuple[int, int]
    position: int
    bid: float
    click: int
    ts: int


def encode_impression(raw: RawImpression, vocab: Vocabulary, max_position: int) -> Impression:
    if not 1 <= raw.position <= max_position:
        raise UsageError(f"position {raw.position} outside [1, {max_position}]")
    if raw.click not in (0, 1):
        raise UsageError(f"click must be 0 or 1, got {raw.click}")
    if raw.bid <= 0:
        raise UsageError(f"bid must be positive, got {raw.bid}")
    if raw.traffic not in TRAFFIC_KINDS:
        raise UsageError(f"traffic must be one of {TRAFFIC_KINDS}, got {raw.traffic!r}")
    return Impression(
        request_id=raw.request_id,
        day=raw.day,
        traffic=raw.traffic,
        user_ids=(vocab.encode("user_id", raw.user_id), vocab.encode("segment", raw.segment)),
        context_ids=(
            vocab.encode("query", raw.query),
            vocab.encode("geo", raw.geo),
            vocab.encode("hour", raw.hour),
            vocab.encode("dow", raw.dow),
        ),
        item_ids=(vocab.encode("item_id", raw.item_id), vocab.encode("category", raw.category)),
        position=raw.position,
        bid=raw.bid,
        click=raw.click,
        ts=raw.ts,
    )


# -- file I/O ---------------------------------------------------------------


def _parse_row(line: str, n_cols: int, path: str, lineno: int) -> list[str]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != n_cols:
        raise FormatError(f"{path}:{lineno}: expected {n_cols} columns, found {len(parts)}")
    return parts


def read_impressions(path) -> list[RawImpression]:
    path = Path(path)
    rows: list[RawImpression] = []
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != list(IMPRESSION_COLUMNS):
            raise FormatError(f"{path}: unsupported impression header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            p = _parse_row(line, len(IMPRESSION_COLUMNS), str(path), lineno)
            try:
                rows.append(
                    RawImpression(
                        request_id=p[0],
                        day=int(p[1]),
                        traffic=p[2],
                        user_id=p[3],
                        segment=p[4],
                        query=p[5],
                        geo=p[6],
                        hour=p[7],
                        dow=p[8],
                        item_id=p[9],
                        category=p[10],
                        position=int(p[11]),
                        bid=float(p[12]),
                        click=int(p[13]),
                        ts=int(p[14]),
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_impressions(path, impressions: Iterable[RawImpression]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(IMPRESSION_COLUMNS) + "\n")
        for imp in impressions:
            fh.write(imp.to_row() + "\n")


def read_behaviors(path) -> list[RawBehavior]:
    path = Path(path)
    rows: list[RawBehavior] = []
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != list(BEHAVIOR_COLUMNS):
            raise FormatError(f"{path}: unsupported behavior header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            p = _parse_row(line, len(BEHAVIOR_COLUMNS), str(path), lineno)
            try:
                rows.append(
                    RawBehavior(
                        user_id=p[0],
                        ts=int(p[1]),
                        position=int(p[2]),
                        item_id=p[3],
                        category=p[4],
                        query=p[5],
                        geo=p[6],
                        hour=p[7],
                        dow=p[8],
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_behaviors(path, behaviors: Iterable[RawBehavior]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(BEHAVIOR_COLUMNS) + "\n")
        for b in behaviors:
            fh.write(b.to_row() + "\n")


# -- behavior sequences ------------------------------------------------------


def time_bucket(delta_seconds: int) -> int:
    """16 logarithmic minute buckets: min(15, floor(log2(1 + dt/60)))."""
    if delta_seconds < 0:
        raise UsageError("time_bucket needs a non-negative time difference")
    return min(TIME_BUCKETS - 1, int(math.floor(math.log2(1.0 + delta_seconds / 60.0))))


@dataclass
class BehaviorRecord:
    """An encoded historical click: item/context ids plus a recency bucket."""

    item_ids: tuple[int, int]
    context_ids: tuple[int, int, int, int]
    bucket: int


@dataclass
class HistoryEvent:
    """An encoded behavior row, pre-vocabulary-mapped and timestamped."""

    ts: int
    position: int
    item_ids: tuple[int, int]
    context_ids: tuple[int, int, int, int]


@dataclass
class PositionBehaviorSequences:
    """Per display position: the user's most recent clicks at that position.

    Sequences are most-recent-first and truncated to `max_len`; `flat` holds
    the most recent `max_len` clicks regardless of position. Clicks at or
    after `reference_ts` never enter (leakage guard); how many were dropped
    is kept for diagnostics.
    """

    max_position: int
    max_len: int
    per_position: list[list[BehaviorRecord]]
    flat: list[BehaviorRecord] = field(default_factory=list)
    leaked: int = 0

    def at(self, position: int) -> list[BehaviorRecord]:
        if not 1 <= position <= self.max_position:
            raise UsageError(f"position {position} outside [1, {self.max_position}]")
        return self.per_position[position - 1]

    def flattened(self) -> list[BehaviorRecord]:
        return self.flat


def encode_history(behaviors: Sequence[RawBehavior], vocab: Vocabulary) -> dict[str, list[HistoryEvent]]:
    """Group behavior rows per user token, sorted by timestamp ascending."""
    grouped: dict[str, list[HistoryEvent]] = {}
    for b in behaviors:
        grouped.setdefault(b.user_id, []).append(
            HistoryEvent(
                ts=b.ts,
                position=b.position,
                item_ids=(vocab.encode("item_id", b.item_id), vocab.encode("category", b.category)),
                context_ids=(
                    vocab.encode("query", b.query),
                    vocab.encode("geo", b.geo),
                    vocab.encode("hour", b.hour),
                    vocab.encode("dow", b.dow),
                ),
            )
        )
    for events in grouped.values():
        events.sort(key=lambda e: e.ts)
    return grouped


def build_position_behavior_sequences(
    history: Sequence[HistoryEvent],
    reference_ts: int,
    max_position: int,
    max_len: int,
) -> PositionBehaviorSequences:
    """Split a user's click history into per-position sequences.

    `history` must be sorted by ts ascending. An event logged at position k
    lands only in sequence k. The most recent `max_len` events are kept per
    position; events at or after `reference_ts` are excluded and counted.
    """
    per_position: list[list[BehaviorRecord]] = [[] for _ in range(max_position)]
    flat: list[BehaviorRecord] = []
    leaked = len(history) - bisect_left([e.ts for e in history], reference_ts)
    cutoff = len(history) - leaked
    for idx in range(cutoff - 1, -1, -1):
        event = history[idx]
        if not 1 <= event.position <= max_position:
            continue
        seq = per_position[event.position - 1]
        if len(seq) >= max_len and len(flat) >= max_len:
            continue
        record = BehaviorRecord(
            item_ids=event.item_ids,
            context_ids=event.context_ids,
            bucket=time_bucket(reference_ts - event.ts),
        )
        if len(seq) < max_len:
            seq.append(record)
        if len(flat) < max_len:
            flat.append(record)
    return PositionBehaviorSequences(
        max_position=max_position,
        max_len=max_len,
        per_position=per_position,
        flat=flat,
        leaked=leaked,
    )


# -- request grouping and dataset splits -------------------------------------


@dataclass
class Candidate:
    item_ids: tuple[int, int]
    bid: float


@dataclass
class Request:
    """Everything needed to score one ranking request."""

    request_id: str
    day: int
    traffic: str
    ts: int
    user_ids: tuple[int, int]
    context_ids: tuple[int, int, int, int]
    candidates: list[Candidate]
    sequences: PositionBehaviorSequences
    # per displayed impression (training/eval only): position, click
    positions: list[int] = field(default_factory=list)
    clicks: list[int] = field(default_factory=list)

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)


def group_requests(
    raw_impressions: Sequence[RawImpression],
    vocab: Vocabulary,
    history_by_user: dict[str, list[HistoryEvent]],
    max_position: int,
    max_len: int,
) -> list[Request]:
    """Group raw impressions by request id and attach behavior sequences.

    `history_by_user` is keyed by the raw user token (see encode_history).
    Requests come out in first-appearance order; displayed items are sorted
    by position.
    """
    by_request: dict[str, list[RawImpression]] = {}
    order: list[str] = []
    for raw in raw_impressions:
        if raw.request_id not in by_request:
            by_request[raw.request_id] = []
            order.append(raw.request_id)
        by_request[raw.request_id].append(raw)

    requests: list[Request] = []
    for rid in order:
        raws = sorted(by_request[rid], key=lambda r: r.position)
        rows = [encode_impression(r, vocab, max_position) for r in raws]
        first = rows[0]
        history = history_by_user.get(raws[0].user_id, [])
        sequences = build_position_behavior_sequences(history, first.ts, max_position, max_len)
        requests.append(
            Request(
                request_id=rid,
                day=first.day,
                traffic=first.traffic,
                ts=first.ts,
                user_ids=first.user_ids,
                context_ids=first.context_ids,
                candidates=[Candidate(item_ids=r.item_ids, bid=r.bid) for r in rows],
                sequences=sequences,
                positions=[r.position for r in rows],
                clicks=[r.click for r in rows],
            )
        )
    return requests


def split_dataset(
    impressions: Sequence[Impression], test_day: int
) -> tuple[list[Impression], list[Impression], list[Impression]]:
    """(train, regular-test, randomized-test) split by day and traffic kind.

    Train is every impression from days strictly before `test_day`; the two
    test partitions cover exactly the impressions of `test_day`.
    """
    train = [i for i in impressions if i.day < test_day]
    test = [i for i in impressions if i.day == test_day]
    regular = [i for i in test if i.traffic == "regular"]
    randomized = [i for i in test if i.traffic == "randomized"]
    return train, regular, randomized
