"""Engine and per-source configuration.

Config files are YAML with one block per source.  Paths inside a config
are resolved relative to the file's directory so a fixture directory can
be copied around wholesale.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path

import yaml

from .ontology import GeoPoint

ENV_CONFIG = "URBANKG_CONFIG"

_DURATION_RE = re.compile(r"^\s*(\d+)\s*(ms|s|m|h|d|w)\s*$")
_DURATION_UNITS = {
    "ms": timedelta(milliseconds=1),
    "s": timedelta(seconds=1),
    "m": timedelta(minutes=1),
    "h": timedelta(hours=1),
    "d": timedelta(days=1),
    "w": timedelta(weeks=1),
}


class ConfigError(ValueError):
    pass


def parse_duration(text: str | int | float) -> timedelta:
    """Parse durations like "15m", "1h", "2d". Bare numbers mean seconds."""
    if isinstance(text, (int, float)):
        return timedelta(seconds=float(text))
    m = _DURATION_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse duration {text!r}")
    return int(m.group(1)) * _DURATION_UNITS[m.group(2)]


@dataclass
class RegionFilter:
    place: str | None = None
    center: GeoPoint | None = None
    radius_km: float | None = None

    def empty(self) -> bool:
        return self.place is None and (self.center is None or self.radius_km is None)


@dataclass
class SourceConfig:
    name: str
    format: str  # gdelt | pems | weather | airquality | image_manifest
    poll_interval: timedelta
    input: str = ""  # path or glob relative to the config dir
    region: RegionFilter = field(default_factory=RegionFilter)
    mapping: dict[str, str] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)
    delimiter: str = "\t"
    incident_source: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("source name empty")
        if self.poll_interval <= timedelta(0):
            raise ConfigError(f"source {self.name}: poll interval must be positive")


@dataclass
class DistanceParams:
    prefix_substitution_cost: float = 0.2
    insert_delete_cost: float = 0.4
    min_prefix_len: int = 3


@dataclass
class EngineConfig:
    sources: list[SourceConfig] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path.cwd)
    warehouse_root: str | None = None
    graph_wal: str | None = None
    backend: str = "stub"  # stub | http
    stub_rules: str | None = None
    top_k: int = 5
    embedding_dims: int = 256
    max_link_candidates: int = 50
    recent_report_limit: int = 5
    summary_max_chars: int = 500
    windows: tuple[timedelta, ...] = (
        timedelta(hours=1),
        timedelta(days=1),
        timedelta(weeks=1),
    )
    distance: DistanceParams = field(default_factory=DistanceParams)
    backend_retries: int = 2
    backend_backoff: float = 0.25
    health_port: int = 0
    queue_size: int = 256

    def source(self, name: str) -> SourceConfig:
        for src in self.sources:
            if src.name == name:
                return src
        raise ConfigError(f"unknown source {name!r}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_DEFAULT_DELIMITERS = {
    "gdelt": "\t",
    "pems": ",",
    "image_manifest": ",",
    "weather": ",",
    "airquality": ",",
}

_KNOWN_FORMATS = ("gdelt", "pems", "weather", "airquality", "image_manifest")


def _region_from(raw: dict) -> RegionFilter:
    center = None
    if "lat" in raw and "lon" in raw:
        center = GeoPoint(float(raw["lat"]), float(raw["lon"]))
    radius = float(raw["radius_km"]) if "radius_km" in raw else None
    return RegionFilter(place=raw.get("place"), center=center, radius_km=radius)


def _source_from(raw: dict) -> SourceConfig:
    if not isinstance(raw, dict):
        raise ConfigError("source entries must be mappings")
    try:
        name = str(raw["name"])
        fmt = str(raw["format"])
    except KeyError as exc:
        raise ConfigError(f"source entry missing {exc.args[0]!r}") from None
    if fmt not in _KNOWN_FORMATS:
        raise ConfigError(f"source {name}: unknown format {fmt!r}")
    region = _region_from(raw.get("region") or {})
    return SourceConfig(
        name=name,
        format=fmt,
        poll_interval=parse_duration(raw.get("poll_interval", "15m")),
        input=str(raw.get("input", "")),
        region=region,
        mapping={str(k): str(v) for k, v in (raw.get("mapping") or {}).items()},
        units={str(k): str(v) for k, v in (raw.get("units") or {}).items()},
        delimiter=str(raw.get("delimiter", _DEFAULT_DELIMITERS[fmt])),
        incident_source=bool(raw.get("incident_source", False)),
    )


def load_config(path: str | os.PathLike[str]) -> EngineConfig:
    """Load an engine config document. Raises ConfigError on bad shape."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    cfg = EngineConfig(base_dir=path.parent.resolve())
    cfg.sources = [_source_from(s) for s in raw.get("sources") or []]
    names = [s.name for s in cfg.sources]
    if len(names) != len(set(names)):
        raise ConfigError("duplicate source names")
    cfg.warehouse_root = raw.get("warehouse_root")
    cfg.graph_wal = raw.get("graph_wal")
    cfg.backend = str(raw.get("backend", "stub"))
    cfg.stub_rules = raw.get("stub_rules")
    cfg.top_k = int(raw.get("top_k", cfg.top_k))
    cfg.embedding_dims = int(raw.get("embedding_dims", cfg.embedding_dims))
    cfg.max_link_candidates = int(raw.get("max_link_candidates", cfg.max_link_candidates))
    cfg.recent_report_limit = int(raw.get("recent_report_limit", cfg.recent_report_limit))
    cfg.summary_max_chars = int(raw.get("summary_max_chars", cfg.summary_max_chars))
    if "windows" in raw:
        cfg.windows = tuple(parse_duration(w) for w in raw["windows"])
    if "distance" in raw:
        d = raw["distance"] or {}
        cfg.distance = DistanceParams(
            prefix_substitution_cost=float(d.get("prefix_substitution_cost", 0.2)),
            insert_delete_cost=float(d.get("insert_delete_cost", 0.4)),
            min_prefix_len=int(d.get("min_prefix_len", 3)),
        )
    cfg.backend_retries = int(raw.get("backend_retries", cfg.backend_retries))
    cfg.backend_backoff = float(raw.get("backend_backoff", cfg.backend_backoff))
    cfg.health_port = int(raw.get("health_port", cfg.health_port))
    cfg.queue_size = int(raw.get("queue_size", cfg.queue_size))
    return cfg
