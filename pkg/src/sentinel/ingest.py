"""Chat-export and incident-timeline ingestion.

Group exports are JSON (Telegram Desktop ``{"messages": [...]}`` or a bare
array as produced by Telethon dumps). Incident timelines are Hackmageddon-style
CSV files. Everything is bucketed by UTC calendar day.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
import json
import logging
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ExportParseError, SchemaError, TimelineFormatError

logger = logging.getLogger(__name__)

DEFAULT_START = date(2023, 1, 1)
DEFAULT_ANON_KEY = b"sentinel-anonymization-v1"
RARE_TYPE_THRESHOLD = 5

DATE_FIELDS = ("date", "timestamp")
TEXT_FIELDS = ("message", "text")
SENDER_FIELDS = ("from", "sender", "from_id", "sender_id")

DATE_COLUMN_ALIASES = ("Date Occurred", "date_occurred", "Occurred", "Date")
TYPE_COLUMN_ALIASES = ("Attack", "Attack Type", "attack_type", "Type")
TARGET_COLUMN_ALIASES = ("Target", "target")


class EmptyTimelineWarning(UserWarning):
    pass


class OutOfRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RawMessage:
    group_id: str
    timestamp: datetime
    text: str
    author_hash: str | None = None

    @property
    def day(self) -> date:
        return self.timestamp.date()


@dataclass(frozen=True)
class GroupDayDoc:
    group_id: str
    date: date
    messages: tuple[str, ...]


@dataclass(frozen=True)
class CyberEvent:
    date: date
    raw_type: str
    canonical_type: str
    target: str | None = None


@dataclass(frozen=True)
class EventTimeline:
    start_date: date
    end_date: date
    counts: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    @property
    def dates(self) -> list[date]:
        return day_range(self.start_date, self.end_date)

    def __len__(self) -> int:
        return len(self.counts)

    def label_on(self, day: date) -> int:
        return int(self.labels[(day - self.start_date).days])


def day_range(start: date, end: date) -> list[date]:
    return [start + timedelta(days=i) for i in range((end - start).days + 1)]


# --------------------------------------------------------------------------
# timestamps
# --------------------------------------------------------------------------

def _to_utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_timestamp(value) -> datetime | None:
    """ISO-8601 string or unix seconds; naive values are taken as UTC."""
    if isinstance(value, bool) or value is None:
        return None
    if isinstance(value, (int, float)):
        try:
            return datetime.fromtimestamp(float(value), tz=timezone.utc)
        except (OverflowError, OSError, ValueError):
            return None
    if not isinstance(value, str):
        return None
    s = value.strip()
    if not s:
        return None
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        return _to_utc(datetime.fromisoformat(s))
    except ValueError:
        return None


_SLASHED = re.compile(r"^(\d{1,2})[/.-](\d{1,2})[/.-](\d{4})(?:[ T].*)?$")


def parse_calendar_day(value: str, date_order: str = "iso") -> date | None:
    """Parse a CSV date cell.

    ISO-8601 is always accepted. ``DD/MM/YYYY`` or ``MM/DD/YYYY`` are accepted
    only when ``date_order`` is ``"dmy"`` or ``"mdy"`` respectively; the order
    is never guessed.
    """
    if date_order not in ("iso", "dmy", "mdy"):
        raise ValueError(f"unknown date order {date_order!r}")
    s = (value or "").strip()
    if not s:
        return None
    m = _SLASHED.match(s)
    if m:
        if date_order == "iso":
            return None
        a, b, year = int(m.group(1)), int(m.group(2)), int(m.group(3))
        day, month = (a, b) if date_order == "dmy" else (b, a)
        try:
            return date(year, month, day)
        except ValueError:
            return None
    try:
        return date.fromisoformat(s[:10])
    except ValueError:
        ts = parse_timestamp(s)
        return ts.date() if ts else None


# --------------------------------------------------------------------------
# group exports
# --------------------------------------------------------------------------

def author_digest(identifier: str, key: bytes = DEFAULT_ANON_KEY) -> str:
    return hmac.new(key, identifier.encode("utf-8"), hashlib.sha256).hexdigest()[:16]


def _flatten_text(value) -> str:
    # Telegram Desktop stores formatted text as a list of strings and entity dicts.
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "".join(_flatten_text(part) for part in value)
    if isinstance(value, dict):
        return _flatten_text(value.get("text", ""))
    return ""


def _first(entry: Mapping, names: Sequence[str]):
    for name in names:
        if name in entry and entry[name] not in (None, ""):
            return entry[name]
    return None


def _scrubber(identifiers: Mapping[str, str]):
    names = sorted((i for i in identifiers if len(i) >= 3), key=len, reverse=True)
    if not names:
        return lambda text: text
    lookup = {n.lower(): identifiers[n] for n in reversed(names)}
    pattern = re.compile("|".join(re.escape(n) for n in names), re.IGNORECASE)
    return lambda text: pattern.sub(lambda m: "@" + lookup[m.group(0).lower()], text)


def parse_group_export(stream: IO[bytes] | bytes, group_id: str, key: bytes = DEFAULT_ANON_KEY) -> list[RawMessage]:
    """Parse one group's JSON export into anonymised messages.

    Entries without a parseable date or with empty text are dropped. Every
    sender field is replaced by a keyed 16-hex digest; sender names that
    appear inside message text are replaced by ``@<digest>`` as well.
    """
    data = stream if isinstance(stream, bytes) else stream.read()
    try:
        doc = json.loads(data)
    except UnicodeDecodeError as exc:
        raise ExportParseError(group_id, exc.start, "invalid UTF-8") from exc
    except json.JSONDecodeError as exc:
        text = data.decode("utf-8", errors="replace") if isinstance(data, bytes) else data
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ExportParseError(group_id, offset, exc.msg) from exc

    if isinstance(doc, dict) and isinstance(doc.get("messages"), list):
        entries = doc["messages"]
    elif isinstance(doc, list):
        entries = doc
    else:
        raise SchemaError(group_id, "no message array")
    entries = [e for e in entries if isinstance(e, dict)]
    if entries and not any(any(f in e for f in DATE_FIELDS) for e in entries):
        raise SchemaError(group_id)

    identifiers: dict[str, str] = {}
    for e in entries:
        for f in SENDER_FIELDS:
            v = e.get(f)
            if v not in (None, ""):
                identifiers[str(v)] = author_digest(str(v), key)
    scrub = _scrubber(identifiers)

    out = []
    for e in entries:
        ts = parse_timestamp(_first(e, DATE_FIELDS))
        if ts is None:
            continue
        text = _flatten_text(_first(e, TEXT_FIELDS))
        if not text.strip():
            continue
        sender = _first(e, SENDER_FIELDS)
        out.append(RawMessage(
            group_id=group_id,
            timestamp=ts,
            text=scrub(text),
            author_hash=None if sender is None else identifiers[str(sender)],
        ))
    return out


def filter_by_date(messages: Iterable[RawMessage], start: date = DEFAULT_START) -> list[RawMessage]:
    return [m for m in messages if m.day >= start]


def group_by_day(messages: Sequence[RawMessage]) -> list[GroupDayDoc]:
    groups = {m.group_id for m in messages}
    if len(groups) > 1:
        raise ContractError(f"group_by_day expects one group, got {sorted(groups)}")
    buckets: dict[date, list[str]] = {}
    for m in messages:
        buckets.setdefault(m.day, []).append(m.text)
    return [GroupDayDoc(messages[0].group_id, day, tuple(buckets[day])) for day in sorted(buckets)]


def load_groups_dir(groups_dir: Path, start: date = DEFAULT_START, key: bytes = DEFAULT_ANON_KEY) -> list[RawMessage]:
    """Parse every ``*.json`` in a directory; group_id is the file stem."""
    out: list[RawMessage] = []
    for path in sorted(Path(groups_dir).glob("*.json"), key=lambda p: p.stem):
        with open(path, "rb") as fh:
            msgs = parse_group_export(fh, path.stem, key)
        kept = filter_by_date(msgs, start)
        logger.info("%s: %d parsed, %d kept after %s", path.stem, len(msgs), len(kept), start)
        out.extend(kept)
    return out


# --------------------------------------------------------------------------
# incident timeline
# --------------------------------------------------------------------------

def _type_key(raw: str) -> str:
    return " ".join(raw.split()).lower()


def count_attack_types(raw_types: Iterable[str]) -> Counter[str]:
    """Global counts keyed by the lowercased, whitespace-normalised raw label."""
    return Counter(_type_key(r) for r in raw_types)


def normalize_attack_type(raw: str, global_counts: Mapping[str, int]) -> str:
    key = _type_key(raw or "")
    if not key:
        return "other"
    if "cve" in key or re.search(r"\bvulnerab", key):
        return "vulnerability"
    if key == "unknown":
        return "other"
    if global_counts.get(key, 0) < RARE_TYPE_THRESHOLD:
        return "other"
    return key


def _find_column(header: Sequence[str], aliases: Sequence[str]) -> str | None:
    lowered = {h.strip().lower(): h for h in header}
    for alias in aliases:
        if alias.strip().lower() in lowered:
            return lowered[alias.strip().lower()]
    return None


def parse_event_timeline(
    stream: IO[bytes] | bytes | str,
    date_order: str = "iso",
    start: date = DEFAULT_START,
    date_aliases: Sequence[str] = DATE_COLUMN_ALIASES,
    type_aliases: Sequence[str] = TYPE_COLUMN_ALIASES,
) -> list[CyberEvent]:
    """Read an incident CSV, keeping rows with a valid occurred-date on/after ``start``.

    Emits :class:`EmptyTimelineWarning` and returns ``[]`` when nothing survives.
    """
    if isinstance(stream, (bytes, str)):
        raw = stream
    else:
        raw = stream.read()
    text = raw.decode("utf-8-sig") if isinstance(raw, bytes) else raw.lstrip("﻿")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames
    if not header:
        raise TimelineFormatError("incident CSV has no header row")
    date_col = _find_column(header, date_aliases)
    type_col = _find_column(header, type_aliases)
    if date_col is None:
        raise TimelineFormatError(f"no date column among {list(date_aliases)}; header is {header}")
    if type_col is None:
        raise TimelineFormatError(f"no attack-type column among {list(type_aliases)}; header is {header}")
    target_col = _find_column(header, TARGET_COLUMN_ALIASES)

    rows = []
    for row in reader:
        day = parse_calendar_day(row.get(date_col) or "", date_order)
        if day is None or day < start:
            continue
        target = (row.get(target_col) or "").strip() if target_col else ""
        rows.append((day, row.get(type_col) or "", target or None))

    if not rows:
        warnings.warn("incident CSV yielded no valid events", EmptyTimelineWarning, stacklevel=2)
        return []
    counts = count_attack_types(r[1] for r in rows)
    return [CyberEvent(day, raw_type, normalize_attack_type(raw_type, counts), target) for day, raw_type, target in rows]


def daily_event_counts(events: Iterable[CyberEvent], start: date, end: date) -> EventTimeline:
    if end < start:
        raise ContractError(f"inverted range {start} > {end}")
    n = (end - start).days + 1
    counts = np.zeros(n, dtype=np.int64)
    outside = 0
    for ev in events:
        i = (ev.date - start).days
        if 0 <= i < n:
            counts[i] += 1
        else:
            outside += 1
    if outside:
        warnings.warn(f"{outside} event(s) outside {start}..{end} excluded", OutOfRangeWarning, stacklevel=2)
    return EventTimeline(start, end, counts, (counts > 0).astype(np.int8))


# --------------------------------------------------------------------------
# normalized corpus files
# --------------------------------------------------------------------------

CORPUS_FILE = "corpus.tsv"
EVENTS_FILE = "events.tsv"


def _iso_utc(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_corpus(path: Path, messages: Iterable[RawMessage]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in messages:
            if "\t" in m.group_id or "\n" in m.group_id:
                raise ContractError(f"group_id {m.group_id!r} contains a tab or newline")
            fh.write(f"{m.group_id}\t{_iso_utc(m.timestamp)}\t{m.author_hash or ''}\t{json.dumps(m.text, ensure_ascii=False)}\n")


def read_corpus(path: Path) -> list[RawMessage]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise TimelineFormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            group_id, ts, author, text = parts
            out.append(RawMessage(group_id, parse_timestamp(ts), json.loads(text), author or None))
    return out


def write_events(path: Path, events: Iterable[CyberEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(f"{ev.date.isoformat()}\t{ev.canonical_type}\t{json.dumps(ev.raw_type, ensure_ascii=False)}\n")


def read_events(path: Path) -> list[CyberEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TimelineFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            out.append(CyberEvent(date.fromisoformat(parts[0]), json.loads(parts[2]), parts[1]))
    return out


def docs_for_corpus(messages: Sequence[RawMessage]) -> list[GroupDayDoc]:
    """Per-group, per-day documents for a mixed-group corpus, ordered by (group_id, date)."""
    by_group: dict[str, list[RawMessage]] = {}
    for m in messages:
        by_group.setdefault(m.group_id, []).append(m)
    docs: list[GroupDayDoc] = []
    for gid in sorted(by_group):
        docs.extend(group_by_day(by_group[gid]))
    return docs
