"""Source adapters: raw payload bytes in, normalized Reports out.

Every parser is total: a malformed record is counted and skipped, never
raised.  Each ParseResult satisfies emitted + skipped + filtered ==
total, where total is the number of records the payload contained
(non-blank lines for delimited text, entries for JSON payloads).

Report ids hash the source name plus a stable per-record key, so
replaying the same fixture produces the same ids and graph upserts stay
idempotent.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import urllib.parse
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Protocol

import requests

from .config import ConfigError, EngineConfig, RegionFilter, SourceConfig
from .graph_store import haversine_km
from .ontology import (
    GeoPoint,
    Modality,
    ModalitySegment,
    Report,
)
from .warehouse import Warehouse

logger = logging.getLogger(__name__)

MAX_ERRORS_KEPT = 20


@dataclass
class RawRecord:
    source: str
    payload: bytes
    fetched_at: datetime
    origin: str = ""


@dataclass
class ParseResult:
    reports: list[Report] = field(default_factory=list)
    total: int = 0
    emitted: int = 0
    skipped: int = 0
    filtered: int = 0
    errors: list[str] = field(default_factory=list)

    def skip(self, reason: str) -> None:
        self.skipped += 1
        if len(self.errors) < MAX_ERRORS_KEPT:
            self.errors.append(reason)

    def merge(self, other: "ParseResult") -> None:
        self.reports.extend(other.reports)
        self.total += other.total
        self.emitted += other.emitted
        self.skipped += other.skipped
        self.filtered += other.filtered
        self.errors.extend(other.errors[: MAX_ERRORS_KEPT - len(self.errors)])


def content_id(prefix: str, *parts: str) -> str:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:16]
    return f"{prefix}:{digest}"


def observer_id(source_name: str, label: str) -> str:
    return "observer:%s:%s" % (
        urllib.parse.quote(source_name, safe=""),
        urllib.parse.quote(label, safe=""),
    )


def aggregator_id(source_name: str) -> str:
    return "aggregator:" + urllib.parse.quote(source_name, safe="")


def region_match(place_text: str | None, geo: GeoPoint | None, region: RegionFilter) -> bool:
    """Place substring or haversine radius; empty filters accept everything."""
    if region.empty():
        return True
    if region.place and place_text and region.place.lower() in place_text.lower():
        return True
    if region.center is not None and region.radius_km is not None and geo is not None:
        d = haversine_km(region.center.lat, region.center.lon, geo.lat, geo.lon)
        if d <= region.radius_km:
            return True
    return False


def parse_any_ts(value: object) -> datetime:
    """Best-effort UTC timestamp parse for the formats our feeds use."""
    if isinstance(value, bool) or value is None:
        raise ValueError(f"not a timestamp: {value!r}")
    if isinstance(value, (int, float)):
        return _from_epoch(float(value))
    text = str(value).strip()
    if not text:
        raise ValueError("empty timestamp")
    if text.isdigit():
        if len(text) == 14:  # YYYYMMDDHHMMSS
            return datetime.strptime(text, "%Y%m%d%H%M%S").replace(tzinfo=timezone.utc)
        if len(text) == 8:  # YYYYMMDD
            return datetime.strptime(text, "%Y%m%d").replace(tzinfo=timezone.utc)
        return _from_epoch(float(text))
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    parsed = datetime.fromisoformat(text)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


def _from_epoch(value: float) -> datetime:
    try:
        return datetime.fromtimestamp(value, tz=timezone.utc)
    except (OverflowError, OSError, ValueError) as exc:
        raise ValueError(f"epoch {value!r} out of range") from exc


def _geo_from(lat_raw: str | float | None, lon_raw: str | float | None,
              place: str | None = None) -> GeoPoint | None:
    try:
        lat = float(lat_raw)  # type: ignore[arg-type]
        lon = float(lon_raw)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        return None
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        return None
    return GeoPoint(lat, lon, place or None)


def _lines(payload: bytes) -> list[str]:
    text = payload.decode("utf-8", errors="replace")
    return [line for line in text.splitlines() if line.strip()]


def _col(row: list[str], mapping: dict[str, str], key: str, default: int) -> str:
    try:
        idx = int(mapping.get(key, default))
    except ValueError:
        raise ValueError(f"mapping for {key!r} is not a column index")
    if idx < 0 or idx >= len(row):
        raise ValueError(f"row has no column {idx} for {key!r}")
    return row[idx].strip()


# ---------------------------------------------------------------------------
# GDELT events

# Column positions in the GDELT 2.0 daily event export.
_GDELT_DEFAULTS = {
    "global_event_id": 0,
    "day": 1,
    "actor1_name": 6,
    "actor2_name": 16,
    "event_code": 26,
    "action_geo_fullname": 52,
    "action_geo_lat": 56,
    "action_geo_lon": 57,
    "date_added": 59,
    "source_url": 60,
}


def parse_gdelt(payload: bytes, source: SourceConfig) -> ParseResult:
    """One Report per event row that survives validation and region filters."""
    result = ParseResult()
    mapping = source.mapping
    for line in _lines(payload):
        result.total += 1
        try:
            row = line.split(source.delimiter or "\t")
            event_id = _col(row, mapping, "global_event_id", _GDELT_DEFAULTS["global_event_id"])
            if not event_id:
                raise ValueError("empty GlobalEventID")
            try:
                observed = parse_any_ts(_col(row, mapping, "date_added", _GDELT_DEFAULTS["date_added"]))
            except ValueError:
                observed = parse_any_ts(_col(row, mapping, "day", _GDELT_DEFAULTS["day"]))
            actor1 = _col(row, mapping, "actor1_name", _GDELT_DEFAULTS["actor1_name"])
            actor2 = _col(row, mapping, "actor2_name", _GDELT_DEFAULTS["actor2_name"])
            code = _col(row, mapping, "event_code", _GDELT_DEFAULTS["event_code"])
            place = _col(row, mapping, "action_geo_fullname", _GDELT_DEFAULTS["action_geo_fullname"])
            url = _col(row, mapping, "source_url", _GDELT_DEFAULTS["source_url"])
            geo = _geo_from(
                _col(row, mapping, "action_geo_lat", _GDELT_DEFAULTS["action_geo_lat"]),
                _col(row, mapping, "action_geo_lon", _GDELT_DEFAULTS["action_geo_lon"]),
                place,
            )
        except ValueError as exc:
            result.skip(f"gdelt row: {exc}")
            continue
        if not region_match(place, geo, source.region):
            result.filtered += 1
            continue
        try:
            host = urllib.parse.urlparse(url).hostname or "gdelt"
        except ValueError:
            host = "gdelt"
        text = (
            f"SOURCEURL={url} | Actor1={actor1} | Actor2={actor2}"
            f" | EventCode={code} | ActionGeo={place}"
        )
        result.reports.append(
            Report(
                id=content_id("report", source.name, event_id),
                aggregator_id=aggregator_id(source.name),
                observer_id=observer_id(source.name, host),
                observed_at=observed,
                geo=geo,
                segments=[ModalitySegment(Modality.TEXT, text)],
            )
        )
        result.emitted += 1
    return result


# ---------------------------------------------------------------------------
# PeMS traffic detectors

_PEMS_DEFAULTS = {
    "timestamp": 0,
    "station": 1,
    "district": 2,
    "lat": 3,
    "lon": 4,
    "speed": 5,
    "occupancy": 6,
}


def parse_pems(payload: bytes, source: SourceConfig) -> ParseResult:
    """One Report per station sample with speed and occupancy segments."""
    result = ParseResult()
    mapping = source.mapping
    speed_unit = source.units.get("speed", "mph")
    occ_unit = source.units.get("occupancy", "fraction")
    for line in _lines(payload):
        result.total += 1
        try:
            row = line.split(source.delimiter or ",")
            observed = parse_any_ts(_col(row, mapping, "timestamp", _PEMS_DEFAULTS["timestamp"]))
            station = _col(row, mapping, "station", _PEMS_DEFAULTS["station"])
            if not station:
                raise ValueError("empty station id")
            district = _col(row, mapping, "district", _PEMS_DEFAULTS["district"])
            speed = float(_col(row, mapping, "speed", _PEMS_DEFAULTS["speed"]))
            occupancy = float(_col(row, mapping, "occupancy", _PEMS_DEFAULTS["occupancy"]))
            if not (math.isfinite(speed) and 0.0 <= speed < 1000.0):
                raise ValueError(f"speed {speed!r} out of range")
            if not (0.0 <= occupancy <= 1.0):
                raise ValueError(f"occupancy {occupancy!r} out of range")
            geo = _geo_from(
                _col(row, mapping, "lat", _PEMS_DEFAULTS["lat"]),
                _col(row, mapping, "lon", _PEMS_DEFAULTS["lon"]),
                district,
            )
        except ValueError as exc:
            result.skip(f"pems row: {exc}")
            continue
        if not region_match(district, geo, source.region):
            result.filtered += 1
            continue
        result.reports.append(
            Report(
                id=content_id("report", source.name, station, observed.isoformat()),
                aggregator_id=aggregator_id(source.name),
                observer_id=observer_id(source.name, station),
                observed_at=observed,
                geo=geo,
                segments=[
                    ModalitySegment(Modality.TABULAR, repr(speed), property="speed", unit=speed_unit),
                    ModalitySegment(
                        Modality.TABULAR, repr(occupancy), property="occupancy", unit=occ_unit
                    ),
                ],
            )
        )
        result.emitted += 1
    return result


# ---------------------------------------------------------------------------
# Weather stations (JSON)

_WEATHER_MEASURES = {
    "windSpeed": "m/s",
    "windGust": "m/s",
    "precipitation": "mm",
    "temperature": "C",
    "humidity": "%",
    "pressure": "hPa",
}


def _json_entries(payload: bytes, records_key: str) -> tuple[list, int]:
    """Entry list from a JSON payload. Undecodable payloads count as one record."""
    try:
        doc = json.loads(payload.decode("utf-8", errors="replace"))
    except (ValueError, RecursionError):
        return [], 1
    if isinstance(doc, dict):
        entries = doc.get(records_key, [])
    elif isinstance(doc, list):
        entries = doc
    else:
        return [], 1
    if not isinstance(entries, list):
        return [], 1
    return entries, len(entries)


def parse_weather(payload: bytes, source: SourceConfig) -> ParseResult:
    """One Report per station entry; numeric fields become tabular segments."""
    result = ParseResult()
    mapping = source.mapping
    entries, total = _json_entries(payload, mapping.get("records", "stations"))
    result.total = total
    if not entries and total:
        result.skip("weather payload not a station list")
        return result
    for entry in entries:
        try:
            if not isinstance(entry, dict):
                raise ValueError("entry is not an object")
            station = str(entry[mapping.get("station", "id")])
            observed = parse_any_ts(entry[mapping.get("at", "at")])
            name = str(entry.get(mapping.get("name", "name"), station))
            geo = _geo_from(entry.get(mapping.get("lat", "lat")), entry.get(mapping.get("lon", "lon")), name)
            segments: list[ModalitySegment] = []
            for prop, default_unit in _WEATHER_MEASURES.items():
                if prop not in entry:
                    continue
                value = float(entry[prop])
                if not math.isfinite(value):
                    raise ValueError(f"{prop} is not finite")
                segments.append(
                    ModalitySegment(
                        Modality.TABULAR,
                        repr(value),
                        property=prop,
                        unit=source.units.get(prop, default_unit),
                    )
                )
            description = str(entry.get(mapping.get("description", "description"), "") or "")
            if description:
                segments.append(ModalitySegment(Modality.TEXT, description))
            if not segments:
                raise ValueError("no usable fields")
        except (KeyError, TypeError, ValueError) as exc:
            result.skip(f"weather entry: {exc}")
            continue
        if not region_match(name, geo, source.region):
            result.filtered += 1
            continue
        result.reports.append(
            Report(
                id=content_id("report", source.name, station, observed.isoformat()),
                aggregator_id=aggregator_id(source.name),
                observer_id=observer_id(source.name, station),
                observed_at=observed,
                geo=geo,
                segments=segments,
            )
        )
        result.emitted += 1
    return result


# ---------------------------------------------------------------------------
# Air quality sensors (JSON)

def parse_airquality(payload: bytes, source: SourceConfig) -> ParseResult:
    """One Report per sensor reading, single PM2.5 segment."""
    result = ParseResult()
    mapping = source.mapping
    entries, total = _json_entries(payload, mapping.get("records", "sensors"))
    result.total = total
    if not entries and total:
        result.skip("airquality payload not a sensor list")
        return result
    value_key = mapping.get("value", "pm2.5")
    prop = mapping.get("property", "PM2.5")
    unit = source.units.get(prop, "µg/m³")
    for entry in entries:
        try:
            if not isinstance(entry, dict):
                raise ValueError("entry is not an object")
            sensor = str(entry[mapping.get("sensor", "sensor_index")])
            observed = parse_any_ts(entry[mapping.get("at", "last_seen")])
            name = str(entry.get(mapping.get("name", "name"), sensor))
            value = float(entry[value_key])
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{value_key} out of range")
            geo = _geo_from(
                entry.get(mapping.get("lat", "latitude")),
                entry.get(mapping.get("lon", "longitude")),
                name,
            )
        except (KeyError, TypeError, ValueError) as exc:
            result.skip(f"airquality entry: {exc}")
            continue
        if not region_match(name, geo, source.region):
            result.filtered += 1
            continue
        result.reports.append(
            Report(
                id=content_id("report", source.name, sensor, observed.isoformat()),
                aggregator_id=aggregator_id(source.name),
                observer_id=observer_id(source.name, sensor),
                observed_at=observed,
                geo=geo,
                segments=[ModalitySegment(Modality.TABULAR, repr(value), property=prop, unit=unit)],
            )
        )
        result.emitted += 1
    return result


# ---------------------------------------------------------------------------
# Camera frame manifests

_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


def load_image_manifest(
    payload: bytes,
    source: SourceConfig,
    warehouse: Warehouse,
    base_dir: Path,
) -> ParseResult:
    """Manifest rows of ``timestamp, cameraId, lat, lon, imagePath``.

    Frame bytes are stored in the blob store; the segment carries the
    blob path.  A ``<imagePath>.tags`` sidecar, when present, rides along
    as the segment annotation.
    """
    result = ParseResult()
    for line in _lines(payload):
        result.total += 1
        try:
            row = [c.strip() for c in line.split(source.delimiter or ",")]
            if len(row) < 5:
                raise ValueError("expected 5 columns")
            observed = parse_any_ts(row[0])
            camera = row[1]
            if not camera:
                raise ValueError("empty cameraId")
            geo = _geo_from(row[2], row[3], camera)
            rel_path = row[4]
            if not rel_path:
                raise ValueError("empty imagePath")
            image_path = (base_dir / rel_path).resolve()
            data = image_path.read_bytes()
        except (ValueError, OSError) as exc:
            result.skip(f"manifest row: {exc}")
            continue
        if not region_match(camera, geo, source.region):
            result.filtered += 1
            continue
        media_type = _MEDIA_TYPES.get(image_path.suffix.lower(), "application/octet-stream")
        ref = warehouse.put_blob(data, media_type)
        annotation = None
        sidecar = image_path.with_name(image_path.name + ".tags")
        if sidecar.exists():
            try:
                annotation = sidecar.read_text(encoding="utf-8").strip() or None
            except OSError as exc:
                logger.warning("sidecar %s unreadable: %s", sidecar, exc)
        result.reports.append(
            Report(
                id=content_id("report", source.name, camera, observed.isoformat()),
                aggregator_id=aggregator_id(source.name),
                observer_id=observer_id(source.name, camera),
                observed_at=observed,
                geo=geo,
                segments=[
                    ModalitySegment(Modality.IMAGE, ref.path, annotation=annotation)
                ],
            )
        )
        result.emitted += 1
    return result


# ---------------------------------------------------------------------------
# Dispatch, fetching, scheduling

def parse_payload(
    payload: bytes,
    source: SourceConfig,
    warehouse: Warehouse | None = None,
    base_dir: Path | None = None,
) -> ParseResult:
    """Route a payload to the parser for the source's format."""
    if source.format == "gdelt":
        return parse_gdelt(payload, source)
    if source.format == "pems":
        return parse_pems(payload, source)
    if source.format == "weather":
        return parse_weather(payload, source)
    if source.format == "airquality":
        return parse_airquality(payload, source)
    if source.format == "image_manifest":
        if warehouse is None or base_dir is None:
            raise ConfigError("image_manifest parsing needs a warehouse and base dir")
        return load_image_manifest(payload, source, warehouse, base_dir)
    raise ConfigError(f"no parser for format {source.format!r}")


class Fetcher(Protocol):
    def fetch(self, source: SourceConfig, base_dir: Path) -> list[RawRecord]:
        ...


class FileFetcher:
    """Reads fixture files matching the source's input glob.

    Zip archives are expanded transparently, one RawRecord per member,
    which matches how event exports are distributed.
    """

    def fetch(self, source: SourceConfig, base_dir: Path) -> list[RawRecord]:
        records: list[RawRecord] = []
        pattern = source.input
        if not pattern:
            return records
        root = Path(pattern)
        paths = [root] if root.is_absolute() and root.is_file() else sorted(base_dir.glob(pattern))
        for path in paths:
            if not path.is_file():
                continue
            fetched = datetime.fromtimestamp(path.stat().st_mtime, tz=timezone.utc)
            if path.suffix.lower() == ".zip":
                try:
                    with zipfile.ZipFile(io.BytesIO(path.read_bytes())) as zf:
                        for member in sorted(zf.namelist()):
                            records.append(
                                RawRecord(source.name, zf.read(member), fetched, f"{path}!{member}")
                            )
                except (OSError, zipfile.BadZipFile) as exc:
                    logger.error("zip %s unreadable: %s", path, exc)
                continue
            try:
                records.append(RawRecord(source.name, path.read_bytes(), fetched, str(path)))
            except OSError as exc:
                logger.error("fixture %s unreadable: %s", path, exc)
        return records


class HttpFetcher:
    """GET the source's input URL; used when running against live feeds."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout

    def fetch(self, source: SourceConfig, base_dir: Path) -> list[RawRecord]:
        try:
            resp = requests.get(source.input, timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            logger.error("fetch %s failed: %s", source.input, exc)
            return []
        return [RawRecord(source.name, resp.content, datetime.now(timezone.utc), source.input)]


def schedule_next(
    config: EngineConfig,
    source_name: str,
    last_poll_at: datetime | None,
    now: datetime,
) -> datetime:
    """Next poll instant: last poll plus the source's interval, never in the past."""
    source = config.source(source_name)  # raises ConfigError when unknown
    if last_poll_at is None:
        return now
    target = last_poll_at + source.poll_interval
    return target if target > now else now
