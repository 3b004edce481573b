"""Multimodal urban sensing: ingestion, enrichment, and a queryable
knowledge graph with lossless exports."""

from .analysis import TrendSummary, WindowStats, compute_trend, render_inference
from .config import (
    ConfigError,
    DistanceParams,
    EngineConfig,
    RegionFilter,
    SourceConfig,
    load_config,
)
from .disambiguation import (
    VectorIndex,
    embed,
    name_distance,
    resolve_actor,
    resolve_incident,
)
from .graph_store import Edge, GraphError, GraphStore, Node
from .inference import (
    Backend,
    BackendError,
    BackendRequest,
    Candidate,
    HttpBackend,
    InferenceTask,
    StubBackend,
    stub_rules_load,
)
from .ingestion import FileFetcher, HttpFetcher, ParseResult, parse_payload
from .ontology import (
    ActorRecord,
    Aggregator,
    EventRecord,
    GeoPoint,
    Incident,
    InferenceRecord,
    Modality,
    ModalitySegment,
    Observer,
    OntologyError,
    Report,
    TimeInterval,
    from_triples,
    to_triples,
    validate,
)
from .pipeline import IngestMetrics, Pipeline, Service, build_pipeline, format_metrics_table
from .warehouse import BlobRef, TimeSeriesPoint, Warehouse, WarehouseError

__version__ = "0.1.0"

__all__ = [
    "ActorRecord",
    "Aggregator",
    "Backend",
    "BackendError",
    "BackendRequest",
    "BlobRef",
    "Candidate",
    "ConfigError",
    "DistanceParams",
    "Edge",
    "EngineConfig",
    "EventRecord",
    "FileFetcher",
    "GeoPoint",
    "GraphError",
    "GraphStore",
    "HttpBackend",
    "HttpFetcher",
    "Incident",
    "InferenceRecord",
    "InferenceTask",
    "IngestMetrics",
    "Modality",
    "ModalitySegment",
    "Node",
    "Observer",
    "OntologyError",
    "ParseResult",
    "Pipeline",
    "RegionFilter",
    "Report",
    "Service",
    "SourceConfig",
    "StubBackend",
    "TimeInterval",
    "TimeSeriesPoint",
    "TrendSummary",
    "VectorIndex",
    "Warehouse",
    "WarehouseError",
    "WindowStats",
    "build_pipeline",
    "compute_trend",
    "embed",
    "format_metrics_table",
    "from_triples",
    "load_config",
    "name_distance",
    "parse_payload",
    "render_inference",
    "resolve_actor",
    "resolve_incident",
    "stub_rules_load",
    "to_triples",
    "validate",
    "__version__",
]
