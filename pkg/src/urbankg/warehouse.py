"""Filesystem-backed measurement and blob storage.

Numeric observations land in per-series append files under
``<root>/series/``; raw payloads (camera frames and the like) go into a
content-addressed store under ``<root>/blobs/`` keyed by sha256.  The
root directory comes from the constructor or the URBANKG_WAREHOUSE
environment variable.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
import urllib.parse
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

ENV_ROOT = "URBANKG_WAREHOUSE"


class WarehouseError(ValueError):
    """Bad values, missing blobs, or checksum mismatches."""


@dataclass(frozen=True)
class TimeSeriesPoint:
    series_key: str
    at: datetime
    value: float
    unit: str


@dataclass(frozen=True)
class BlobRef:
    path: str
    media_type: str
    sha256: str


def _require_utc(at: datetime, what: str) -> datetime:
    if at.tzinfo is None:
        raise WarehouseError(f"{what} timestamp must be timezone aware")
    return at.astimezone(timezone.utc)


class Warehouse:
    """Time-series append store plus content-addressed blob store."""

    def __init__(self, root: str | os.PathLike[str] | None = None):
        if root is None:
            root = os.environ.get(ENV_ROOT)
        if not root:
            raise WarehouseError(f"no warehouse root given and {ENV_ROOT} is unset")
        self.root = Path(root)
        (self.root / "series").mkdir(parents=True, exist_ok=True)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        self._series_cache: dict[str, dict[datetime, TimeSeriesPoint]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._meta_lock = threading.Lock()

    def _series_lock(self, key: str) -> threading.Lock:
        with self._meta_lock:
            lock = self._locks.get(key)
            if lock is None:
                lock = threading.Lock()
                self._locks[key] = lock
            return lock

    def _series_path(self, key: str) -> Path:
        return self.root / "series" / (urllib.parse.quote(key, safe="") + ".tsv")

    def _load_series(self, key: str) -> dict[datetime, TimeSeriesPoint]:
        cached = self._series_cache.get(key)
        if cached is not None:
            return cached
        points: dict[datetime, TimeSeriesPoint] = {}
        path = self._series_path(key)
        if path.exists():
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    ts_raw, value_raw, unit = line.split("\t")
                    at = datetime.fromisoformat(ts_raw)
                    points[at] = TimeSeriesPoint(key, at, float(value_raw), unit)
                except ValueError as exc:
                    logger.warning("series %s line %d unreadable: %s", key, lineno, exc)
        self._series_cache[key] = points
        return points

    def append_point(self, point: TimeSeriesPoint) -> None:
        """Append one observation. A rewrite at the same timestamp wins."""
        if not point.series_key:
            raise WarehouseError("seriesKey empty")
        if not isinstance(point.value, (int, float)) or not math.isfinite(point.value):
            raise WarehouseError(f"value {point.value!r} is not a finite number")
        at = _require_utc(point.at, "point")
        stored = TimeSeriesPoint(point.series_key, at, float(point.value), point.unit)
        with self._series_lock(point.series_key):
            points = self._load_series(point.series_key)
            points[at] = stored
            with open(self._series_path(point.series_key), "a", encoding="utf-8") as fh:
                fh.write(f"{at.isoformat()}\t{stored.value!r}\t{stored.unit}\n")

    def range_query(self, series_key: str, start: datetime, end: datetime) -> list[TimeSeriesPoint]:
        """Points with start <= at < end, ascending. Unknown series is empty."""
        start = _require_utc(start, "start")
        end = _require_utc(end, "end")
        with self._series_lock(series_key):
            points = self._load_series(series_key)
            hits = [p for at, p in points.items() if start <= at < end]
        hits.sort(key=lambda p: p.at)
        return hits

    def latest_point(self, series_key: str, at_or_before: datetime) -> TimeSeriesPoint | None:
        """Most recent point observed at or before the given instant."""
        cutoff = _require_utc(at_or_before, "cutoff")
        with self._series_lock(series_key):
            points = self._load_series(series_key)
            best: TimeSeriesPoint | None = None
            for at, p in points.items():
                if at <= cutoff and (best is None or at > best.at):
                    best = p
            return best

    def series_keys(self) -> list[str]:
        keys = set(self._series_cache)
        for path in (self.root / "series").glob("*.tsv"):
            keys.add(urllib.parse.unquote(path.name[: -len(".tsv")]))
        return sorted(keys)

    # -- blobs ---------------------------------------------------------------

    def put_blob(self, data: bytes, media_type: str) -> BlobRef:
        """Store bytes content-addressed; identical bytes share one object."""
        digest = hashlib.sha256(data).hexdigest()
        rel = f"blobs/{digest[:2]}/{digest}"
        target = self.root / rel
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(f"{target.name}.{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return BlobRef(rel, media_type, digest)

    def get_blob(self, ref: BlobRef) -> bytes:
        """Fetch blob bytes, verifying the stored checksum."""
        target = self.root / ref.path
        if not target.exists():
            raise WarehouseError(f"blob {ref.path} missing")
        data = target.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != ref.sha256:
            raise WarehouseError(
                f"blob {ref.path} checksum mismatch: stored {digest[:12]}, expected {ref.sha256[:12]}"
            )
        return data
