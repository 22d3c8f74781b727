"""Day x (groups * dim) feature matrix with zero-filled gaps, and label alignment."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed import EPOCH, DailyGroupEmbedding, _pack_str, _Reader
from .errors import AlignmentError, CacheReadError, ContractError
from .ingest import CyberEvent, EventTimeline, day_range

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureMatrix:
    dates: list[date]
    group_order: list[str]
    dim: int
    rows: np.ndarray = field(repr=False)
    message_totals: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.message_totals is None:
            object.__setattr__(self, "message_totals", np.zeros(len(self.dates), dtype=np.int64))

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def block(self, t: int, group_id: str) -> np.ndarray:
        g = self.group_order.index(group_id)
        return self.rows[t, g * self.dim : (g + 1) * self.dim]


@dataclass(frozen=True)
class LabeledDataset:
    X: FeatureMatrix
    y: np.ndarray


def build_daily_matrix(
    entries: Iterable[DailyGroupEmbedding],
    start: date,
    end: date,
    dim: int | None = None,
) -> FeatureMatrix:
    """Place each pooled vector in its (day, group) block; everything else is zero.

    Column blocks follow lexicographically sorted group ids, counting every
    group present in ``entries`` even if all its days fall outside the range.
    """
    if end < start:
        raise ContractError(f"inverted range {start} > {end}")
    entries = list(entries)
    dims = {e.vector.shape[0] for e in entries}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise ContractError(f"entries disagree on dim: {sorted(dims)}")
    dim = dims.pop() if dims else 0

    seen: set[tuple[str, date]] = set()
    for e in entries:
        key = (e.group_id, e.date)
        if key in seen:
            raise ContractError(f"duplicate entry for group {e.group_id} on {e.date}")
        seen.add(key)

    groups = sorted({e.group_id for e in entries})
    col = {g: i for i, g in enumerate(groups)}
    dates = day_range(start, end)
    rows = np.zeros((len(dates), dim * len(groups)), dtype=np.float64)
    totals = np.zeros(len(dates), dtype=np.int64)
    dropped = 0
    for e in entries:
        t = (e.date - start).days
        if not 0 <= t < len(dates):
            dropped += 1
            continue
        g = col[e.group_id]
        rows[t, g * dim : (g + 1) * dim] = e.vector
        totals[t] += e.message_count
    if dropped:
        logger.info("truncated %d daily embedding(s) outside %s..%s", dropped, start, end)
    return FeatureMatrix(dates, groups, dim, rows, totals)


def default_range(entries: Sequence[DailyGroupEmbedding], events: Sequence[CyberEvent]) -> tuple[date, date]:
    """Overlap of the message span and the event span."""
    if not entries or not events:
        raise ContractError("need at least one daily embedding and one event to derive a range")
    msg_days = [e.date for e in entries]
    ev_days = [e.date for e in events]
    start, end = max(min(msg_days), min(ev_days)), min(max(msg_days), max(ev_days))
    if end < start:
        raise ContractError(f"message span and event span do not overlap ({start} > {end})")
    return start, end


def align_labels(X: FeatureMatrix, tl: EventTimeline) -> LabeledDataset:
    missing = [d for d in X.dates if not tl.start_date <= d <= tl.end_date]
    if missing:
        raise AlignmentError(missing)
    offset = (X.dates[0] - tl.start_date).days if X.dates else 0
    y = np.asarray(tl.labels[offset : offset + len(X.dates)], dtype=np.int8).copy()
    return LabeledDataset(X, y)


# --------------------------------------------------------------------------
# matrix file + label sidecar
# --------------------------------------------------------------------------

MATRIX_MAGIC = b"SNTLMAT\x00"
MATRIX_VERSION = 1


def write_matrix(path: Path, X: FeatureMatrix, provider_id: str) -> None:
    parts = [
        MATRIX_MAGIC,
        struct.pack("<H", MATRIX_VERSION),
        _pack_str(provider_id),
        struct.pack("<II", X.dim, len(X.group_order)),
    ]
    parts.extend(_pack_str(g) for g in X.group_order)
    start = (X.dates[0] - EPOCH).days if X.dates else 0
    parts.append(struct.pack("<II", start, len(X.dates)))
    parts.append(np.asarray(X.message_totals, dtype="<u4").tobytes())
    parts.append(np.asarray(X.rows, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_matrix(path: Path) -> tuple[str, FeatureMatrix]:
    r = _Reader(Path(path).read_bytes())
    try:
        if r.take(len(MATRIX_MAGIC)) != MATRIX_MAGIC:
            raise CacheReadError(f"{path}: not a feature matrix file")
        (version,) = r.unpack("<H")
        if version != MATRIX_VERSION:
            raise CacheReadError(f"{path}: matrix format version {version}, expected {MATRIX_VERSION}")
        provider_id = r.string()
        dim, n_groups = r.unpack("<II")
        groups = [r.string() for _ in range(n_groups)]
        start, n_days = r.unpack("<II")
        totals = np.frombuffer(r.take(4 * n_days), dtype="<u4").astype(np.int64)
        rows = np.frombuffer(r.take(4 * n_days * dim * n_groups), dtype="<f4").astype(np.float64)
    except EOFError:
        raise CacheReadError(f"{path}: truncated matrix file") from None
    first = EPOCH + timedelta(days=start)
    dates = [first + timedelta(days=i) for i in range(n_days)]
    return provider_id, FeatureMatrix(dates, groups, dim, rows.reshape(n_days, dim * n_groups), totals)


def write_label_sidecar(path: Path, ds: LabeledDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "label", "messages_total"])
        for d, label, total in zip(ds.X.dates, ds.y, ds.X.message_totals):
            w.writerow([d.isoformat(), int(label), int(total)])


def read_label_sidecar(path: Path) -> tuple[list[date], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [date.fromisoformat(r["date"]) for r in rows], np.array([int(r["label"]) for r in rows], dtype=np.int8)
