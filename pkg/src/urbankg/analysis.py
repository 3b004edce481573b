"""Sliding-window trend statistics over warehouse series.

For each configured window the latest observation is scored against the
population mean and standard deviation of the points inside
``[now - window, now)``.  A window needs at least two points and nonzero
spread before a z-score is emitted; any window with ``|z| >= 3`` marks
the whole summary anomalous.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .ontology import InferenceRecord
from .warehouse import Warehouse

ANOMALY_Z = 3.0
FLAT_Z = 0.5
DEFAULT_WINDOWS = (timedelta(hours=1), timedelta(days=1), timedelta(weeks=1))

TREND_INFERENCE_TYPE = "Trend Analysis"


@dataclass
class WindowStats:
    window: timedelta
    sample_count: int
    mean: float
    std: float
    z_score: float | None
    direction: str  # rising | falling | flat


@dataclass
class TrendSummary:
    series_key: str
    latest_value: float | None
    latest_at: datetime | None
    unit: str
    per_window: list[WindowStats] = field(default_factory=list)
    anomalous: bool = False


def _window_label(window: timedelta) -> str:
    seconds = int(window.total_seconds())
    for size, suffix in ((604800, "w"), (86400, "d"), (3600, "h"), (60, "m")):
        if seconds % size == 0 and seconds >= size:
            return f"{seconds // size}{suffix}"
    return f"{seconds}s"


def compute_trend(
    warehouse: Warehouse,
    series_key: str,
    now: datetime,
    windows: tuple[timedelta, ...] = DEFAULT_WINDOWS,
) -> TrendSummary:
    """Score the latest observation of a series against recent history.

    ``now`` is the evaluation instant: each window covers
    ``[now - window, now)``, so an observation stamped exactly at ``now``
    counts as "latest" but not as history.
    """
    latest = warehouse.latest_point(series_key, now)
    summary = TrendSummary(
        series_key,
        latest.value if latest else None,
        latest.at if latest else None,
        latest.unit if latest else "",
    )
    for window in windows:
        points = warehouse.range_query(series_key, now - window, now)
        n = len(points)
        if n == 0:
            summary.per_window.append(WindowStats(window, 0, 0.0, 0.0, None, "flat"))
            continue
        values = [p.value for p in points]
        mean = statistics.fmean(values)
        std = statistics.pstdev(values)
        z: float | None = None
        if latest is not None and n >= 2 and std > 0.0:
            z = (latest.value - mean) / std
        if z is None or abs(z) < FLAT_Z:
            direction = "flat"
        elif z > 0:
            direction = "rising"
        else:
            direction = "falling"
        if z is not None and abs(z) >= ANOMALY_Z:
            summary.anomalous = True
        summary.per_window.append(WindowStats(window, n, mean, std, z, direction))
    return summary


def render_inference(summary: TrendSummary) -> InferenceRecord:
    """Fixed-template text rendering of a trend summary.

    The template is part of the output contract: downstream linking keys
    off the words it emits (notably "anomalous").
    """
    if summary.latest_value is None:
        body = f"{summary.series_key}: no data"
        return InferenceRecord(TREND_INFERENCE_TYPE, body)
    unit = f" {summary.unit}" if summary.unit else ""
    parts = [
        f"{summary.series_key}: latest {summary.latest_value:g}{unit}"
        f" at {summary.latest_at.isoformat()}"
    ]
    for ws in summary.per_window:
        z_text = f"z={ws.z_score:+.2f}" if ws.z_score is not None else "z=n/a"
        parts.append(
            f"{_window_label(ws.window)}: n={ws.sample_count}"
            f" mean={ws.mean:g} std={ws.std:g} {z_text} {ws.direction}"
        )
    parts.append("anomalous" if summary.anomalous else "normal")
    return InferenceRecord(TREND_INFERENCE_TYPE, "; ".join(parts))
