"""End-to-end flow: fetch, parse, enrich, insert, resolve, link.

Graph mutation is deliberately single-writer: one worker consumes all
reports so replay order is exact and latencies are honest.  Per report,
"processing" covers the enrichment calls (actor/event parsing, image
captioning, trend scoring) and "KG insert" covers graph writes, entity
resolution, and cross-modal linking; the two are timed separately and
averaged per source.
"""

from __future__ import annotations

import http.server
import json
import logging
import queue
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

from . import disambiguation, inference
from .analysis import compute_trend, render_inference
from .config import ConfigError, EngineConfig, SourceConfig
from .disambiguation import VectorIndex, resolve_actor, resolve_incident
from .graph_store import Edge, GraphStore, Node
from .inference import (
    Backend,
    BackendError,
    BackendRequest,
    BoundedBackend,
    Candidate,
    HttpBackend,
    InferenceTask,
    StubBackend,
    stub_rules_load,
)
from .ingestion import (
    Fetcher,
    FileFetcher,
    HttpFetcher,
    ParseResult,
    content_id,
    parse_payload,
    schedule_next,
)
from .ontology import (
    Aggregator,
    ActorRecord,
    EventRecord,
    Incident,
    InferenceRecord,
    Modality,
    ModalitySegment,
    Observer,
    Report,
    TimeInterval,
    to_triples,
)
from .warehouse import TimeSeriesPoint, Warehouse

logger = logging.getLogger(__name__)

PARSE_INFERENCE_TYPE = "Actor Event Parsing"
CAPTION_INFERENCE_TYPE = "Image Captioning"

# Linking only looks back this far for closed incidents; open incidents
# (no end time) always remain candidates.
LINK_LOOKBACK = timedelta(days=30)

METRICS_FILENAME = "metrics.tsv"
INDEX_FILENAME = "incident_index.jsonl"
WAL_FILENAME = "graph.wal"

TABLE_COLUMNS = ("Data Source", "Processing Latency (s)", "KG insert latency (s)")


@dataclass
class IngestMetrics:
    source: str
    reports: int = 0
    failures: int = 0
    processing_total: float = 0.0
    kg_insert_total: float = 0.0
    actor_merges: int = 0
    actor_merge_total: float = 0.0
    incident_merges: int = 0
    incident_merge_total: float = 0.0

    def processing_mean(self) -> float:
        return self.processing_total / self.reports if self.reports else 0.0

    def kg_insert_mean(self) -> float:
        return self.kg_insert_total / self.reports if self.reports else 0.0

    def actor_merge_mean(self) -> float:
        return self.actor_merge_total / self.actor_merges if self.actor_merges else 0.0

    def incident_merge_mean(self) -> float:
        return self.incident_merge_total / self.incident_merges if self.incident_merges else 0.0


@dataclass
class ReplayResult:
    metrics: dict[str, IngestMetrics]
    parse: dict[str, ParseResult]


@dataclass
class _Staging:
    """Stage-A outputs waiting for graph insertion."""
    parses: list[tuple[int, inference.ParsedActorsEvents]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)


def series_key(report: Report, segment: ModalitySegment) -> str:
    return f"{report.observer_id}:{segment.property}"


def _render_parse(parsed: inference.ParsedActorsEvents) -> str:
    actor_bits = [
        f"{a.name} ({a.cameo_actor_code})" if a.cameo_actor_code else a.name
        for a in parsed.actors
    ]
    event_bits = []
    for ev in parsed.events:
        involved = "/".join(n for n in (ev.actor1_name, ev.actor2_name) if n)
        event_bits.append(f"{ev.cameo_event_code}[{involved}]" if involved else ev.cameo_event_code)
    parts = [
        "actors: " + (", ".join(actor_bits) or "none"),
        "events: " + (", ".join(event_bits) or "none"),
        "cap: " + (parsed.cap_category or "n/a"),
        "incident: " + (parsed.incident_label or "none"),
    ]
    return "; ".join(parts)


def _render_caption(result: inference.CaptionResult) -> str:
    tags = ", ".join(result.tags) if result.tags else "none"
    noteworthy = "yes" if result.noteworthy else "no"
    return f"{result.caption} | tags: {tags} | noteworthy: {noteworthy}"


def _observer_label(observer_id: str) -> str:
    parts = observer_id.split(":", 2)
    return urllib.parse.unquote(parts[2]) if len(parts) == 3 else observer_id


def _actor_id(name: str) -> str:
    return content_id("actor", " ".join(disambiguation.tokenize(name)))


def _incident_id(label: str, report_id: str) -> str:
    return content_id("incident", " ".join(disambiguation.tokenize(label)), report_id)


class Pipeline:
    def __init__(
        self,
        config: EngineConfig,
        store: GraphStore,
        warehouse: Warehouse,
        backend: Backend,
        index: VectorIndex | None = None,
        clock=time.perf_counter,
    ):
        self.config = config
        self.store = store
        self.warehouse = warehouse
        self.backend = backend
        self.index = index if index is not None else VectorIndex(dims=config.embedding_dims)
        self.clock = clock
        self.metrics: dict[str, IngestMetrics] = {
            s.name: IngestMetrics(s.name) for s in config.sources
        }

    # -- single-report ingestion ---------------------------------------------

    def ingest_report(self, report: Report, source: SourceConfig) -> None:
        """Enrich and insert one report.  Never raises: a failed stage
        leaves the report in the graph flagged for review."""
        m = self.metrics.setdefault(source.name, IngestMetrics(source.name))
        staging = _Staging()
        try:
            t0 = self.clock()
            self._enrich(report, source, staging)
            t1 = self.clock()
            self._insert(report, source, staging, m)
            self._link(report, source, staging)
            t2 = self.clock()
        except (BackendError, ValueError, OSError) as exc:
            logger.error("ingest of %s failed: %s", report.id, exc)
            m.failures += 1
            self._mark_failed(report, str(exc))
            return
        if staging.failures:
            m.failures += 1
            self._mark_failed(report, "; ".join(staging.failures))
        else:
            m.reports += 1
            m.processing_total += t1 - t0
            m.kg_insert_total += t2 - t1

    def _run(self, task: InferenceTask, context: dict, max_candidates: int = 50):
        return inference.run(
            self.backend,
            BackendRequest(task, context, max_candidates),
            retries=self.config.backend_retries,
            backoff=self.config.backend_backoff,
        )

    def _enrich(self, report: Report, source: SourceConfig, staging: _Staging) -> None:
        for i, seg in enumerate(report.segments):
            try:
                if seg.kind is Modality.TEXT:
                    parsed = self._run(InferenceTask.ACTOR_EVENT_PARSE, {"text": seg.value})
                    staging.parses.append((i, parsed))
                    seg.inferences.append(
                        InferenceRecord(PARSE_INFERENCE_TYPE, _render_parse(parsed))
                    )
                elif seg.kind is Modality.IMAGE:
                    caption = self._run(
                        InferenceTask.IMAGE_CAPTION,
                        {"image_path": seg.value, "annotation": seg.annotation or ""},
                    )
                    seg.inferences.append(
                        InferenceRecord(CAPTION_INFERENCE_TYPE, _render_caption(caption))
                    )
                else:
                    key = series_key(report, seg)
                    self.warehouse.append_point(
                        TimeSeriesPoint(key, report.observed_at, float(seg.value), seg.unit or "")
                    )
                    summary = compute_trend(
                        self.warehouse, key, report.observed_at, self.config.windows
                    )
                    seg.inferences.append(render_inference(summary))
            except BackendError as exc:
                staging.failures.append(f"segment {i}: {exc.detail}")

    def _insert(
        self,
        report: Report,
        source: SourceConfig,
        staging: _Staging,
        m: IngestMetrics,
    ) -> None:
        store = self.store
        store.upsert_triples(to_triples(Observer(report.observer_id, _observer_label(report.observer_id))))
        store.upsert_triples(to_triples(Aggregator(report.aggregator_id, source.name)))
        store.upsert_triples(to_triples(report))
        store.upsert_edge(Edge(report.id, "sigmus:collectedBy", report.aggregator_id))

        for seg_index, parsed in staging.parses:
            resolved: dict[str, str] = {}
            for actor in parsed.actors:
                record = ActorRecord(_actor_id(actor.name), actor.name, actor.cameo_actor_code)
                t0 = self.clock()
                resolution = resolve_actor(
                    store, self.backend, record,
                    top_k=self.config.top_k,
                    params=self.config.distance,
                    retries=self.config.backend_retries,
                    backoff=self.config.backend_backoff,
                )
                m.actor_merges += 1
                m.actor_merge_total += self.clock() - t0
                resolved[actor.name] = resolution.entity_id

            for ev_index, ev in enumerate(parsed.events):
                event = EventRecord(
                    content_id("event", report.id, str(seg_index), str(ev_index), ev.cameo_event_code),
                    ev.cameo_event_code,
                    actor1=resolved.get(ev.actor1_name) if ev.actor1_name else None,
                    actor2=resolved.get(ev.actor2_name) if ev.actor2_name else None,
                    cap_category=parsed.cap_category,
                )
                store.upsert_triples(to_triples(event))
                store.upsert_edge(Edge(report.id, "sigmus:describesEvent", event.id))

            if parsed.incident_label and source.incident_source:
                incident = Incident(
                    _incident_id(parsed.incident_label, report.id),
                    parsed.incident_label,
                    parsed.incident_description or "",
                    TimeInterval(report.observed_at),
                    geo=report.geo,
                    source_report_ids=[report.id],
                )
                source_text = report.segments[seg_index].value
                t0 = self.clock()
                resolution = resolve_incident(
                    store, self.index, self.backend, incident, source_text,
                    top_k=self.config.top_k,
                    retries=self.config.backend_retries,
                    backoff=self.config.backend_backoff,
                )
                m.incident_merges += 1
                m.incident_merge_total += self.clock() - t0
                store.upsert_edge(Edge(report.id, "sigmus:evidenceOf", resolution.entity_id))

    def _report_summary(self, report: Report) -> str:
        pieces: list[str] = []
        for seg in report.segments:
            if seg.kind is Modality.TEXT:
                pieces.append(seg.value)
            for inf in seg.inferences:
                pieces.append(inf.inference_result)
        return " | ".join(p for p in pieces if p)[: self.config.summary_max_chars]

    def _link(self, report: Report, source: SourceConfig, staging: _Staging) -> None:
        """Attach a non-incident-source report to incidents it evidences."""
        if source.incident_source:
            return
        window = TimeInterval(report.observed_at - LINK_LOOKBACK, report.observed_at)
        contexts = self.store.query_incidents(
            window=window,
            recent_limit=self.config.recent_report_limit,
            summary_max_chars=self.config.summary_max_chars,
        )[: self.config.max_link_candidates]
        candidates = []
        for ctx in contexts:
            recent = " | ".join(r.summary for r in ctx.recent_reports if r.summary)
            summary = " | ".join(p for p in (ctx.incident.description, recent) if p)
            candidates.append(
                Candidate(ctx.incident.id, ctx.incident.label, summary[: self.config.summary_max_chars])
            )
        try:
            decision = self._run(
                InferenceTask.CROSS_MODAL_LINK,
                {"report_summary": self._report_summary(report), "candidates": candidates},
                max_candidates=self.config.max_link_candidates,
            )
        except BackendError as exc:
            staging.failures.append(f"link: {exc.detail}")
            return
        for incident_id in decision.linked_incident_ids:
            props = {"sigmus:rationale": decision.rationale} if decision.rationale else {}
            self.store.upsert_edge(Edge(report.id, "sigmus:evidenceOf", incident_id, props))

    def _mark_failed(self, report: Report, reason: str) -> None:
        node = self.store.get_node(report.id)
        props = node.properties if node else {"sigmus:observedAt": report.observed_at.isoformat()}
        props["sigmus:ingestFailed"] = True
        props["sigmus:failureReason"] = reason[:500]
        self.store.upsert_node(Node(report.id, "Report", props))

    # -- replay ---------------------------------------------------------------

    def replay(
        self,
        fetcher: Fetcher | None = None,
        speedup: float = 0.0,
        sleep=time.sleep,
    ) -> ReplayResult:
        """Parse every source's fixture input and ingest reports in
        observed-time order.  ``speedup`` > 0 sleeps the scaled gap
        between consecutive reports; 0 replays as fast as possible.
        """
        fetcher = fetcher or FileFetcher()
        parse_stats: dict[str, ParseResult] = {}
        timeline: list[tuple[datetime, str, Report, SourceConfig]] = []
        for source in self.config.sources:
            stats = ParseResult()
            for record in fetcher.fetch(source, self.config.base_dir):
                stats.merge(parse_payload(record.payload, source, self.warehouse, self.config.base_dir))
            parse_stats[source.name] = stats
            for report in stats.reports:
                timeline.append((report.observed_at, report.id, report, source))
        timeline.sort(key=lambda item: (item[0], item[1]))

        previous: datetime | None = None
        for observed_at, _, report, source in timeline:
            if speedup > 0 and previous is not None and observed_at > previous:
                sleep((observed_at - previous).total_seconds() / speedup)
            previous = observed_at
            self.ingest_report(report, source)
        return ReplayResult(dict(self.metrics), parse_stats)


# ---------------------------------------------------------------------------
# Construction helpers

def build_backend(config: EngineConfig) -> Backend:
    if config.backend == "stub":
        rules = []
        if config.stub_rules:
            rules = stub_rules_load(config.resolve(config.stub_rules))
        return StubBackend(rules)
    if config.backend == "http":
        return BoundedBackend(HttpBackend.from_env())
    raise ConfigError(f"unknown backend {config.backend!r}")


def build_pipeline(config: EngineConfig) -> Pipeline:
    """Assemble a pipeline with state rooted under the warehouse dir.

    The graph WAL and the incident vector index live next to the series
    data so a later invocation picks up exactly where this one stopped.
    """
    warehouse = Warehouse(config.resolve(config.warehouse_root) if config.warehouse_root else None)
    wal = config.resolve(config.graph_wal) if config.graph_wal else warehouse.root / WAL_FILENAME
    store = GraphStore(wal_path=wal)
    index = VectorIndex(warehouse.root / INDEX_FILENAME, dims=config.embedding_dims)
    return Pipeline(config, store, warehouse, build_backend(config), index)


# ---------------------------------------------------------------------------
# Metrics rendering

def format_metrics_table(metrics: dict[str, IngestMetrics], order: list[str]) -> str:
    """Fixed-width table with one row per configured source."""
    rows = []
    for name in order:
        m = metrics.get(name, IngestMetrics(name))
        rows.append((name, f"{m.processing_mean():.4f}", f"{m.kg_insert_mean():.4f}"))
    widths = [
        max(len(TABLE_COLUMNS[i]), *(len(r[i]) for r in rows)) if rows else len(TABLE_COLUMNS[i])
        for i in range(3)
    ]

    def fmt(cells: tuple[str, str, str]) -> str:
        left = cells[0].ljust(widths[0])
        mid = cells[1].rjust(widths[1])
        right = cells[2].rjust(widths[2])
        return f"| {left} | {mid} | {right} |"

    lines = [fmt(TABLE_COLUMNS), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


def save_metrics(metrics: dict[str, IngestMetrics], path: Path) -> None:
    fields = (
        "source", "reports", "failures", "processing_total", "kg_insert_total",
        "actor_merges", "actor_merge_total", "incident_merges", "incident_merge_total",
    )
    lines = ["\t".join(fields)]
    for name in sorted(metrics):
        m = metrics[name]
        lines.append("\t".join(str(getattr(m, f)) for f in fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_metrics(path: Path) -> dict[str, IngestMetrics]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        return {}
    header = lines[0].split("\t")
    out: dict[str, IngestMetrics] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = dict(zip(header, line.split("\t")))
        m = IngestMetrics(
            cells["source"],
            reports=int(cells["reports"]),
            failures=int(cells["failures"]),
            processing_total=float(cells["processing_total"]),
            kg_insert_total=float(cells["kg_insert_total"]),
            actor_merges=int(cells["actor_merges"]),
            actor_merge_total=float(cells["actor_merge_total"]),
            incident_merges=int(cells["incident_merges"]),
            incident_merge_total=float(cells["incident_merge_total"]),
        )
        out[m.source] = m
    return out


# ---------------------------------------------------------------------------
# Long-running service

class _HealthHandler(http.server.BaseHTTPRequestHandler):
    def do_GET(self):  # noqa: N802  (stdlib naming)
        service: "Service" = self.server.service  # type: ignore[attr-defined]
        if self.path not in ("/", "/health"):
            self.send_error(404)
            return
        body = json.dumps(service.health(), sort_keys=True).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        logger.debug("health: " + fmt, *args)


class Service:
    """Polling scheduler, bounded queue, single ingest worker, health port."""

    def __init__(self, pipeline: Pipeline, fetcher: Fetcher | None = None):
        self.pipeline = pipeline
        self.config = pipeline.config
        self.fetcher = fetcher or (
            HttpFetcher() if any(s.input.startswith("http") for s in self.config.sources)
            else FileFetcher()
        )
        self.queue: "queue.Queue[tuple[Report, SourceConfig]]" = queue.Queue(
            maxsize=self.config.queue_size
        )
        self.stop_event = threading.Event()
        self.threads: list[threading.Thread] = []
        self.last_success: dict[str, str | None] = {s.name: None for s in self.config.sources}
        self.last_error: dict[str, str | None] = {s.name: None for s in self.config.sources}
        self._server: http.server.ThreadingHTTPServer | None = None
        self.health_port: int | None = None

    def health(self) -> dict:
        sources = {}
        for name in self.last_success:
            m = self.pipeline.metrics.get(name)
            sources[name] = {
                "lastSuccess": self.last_success[name],
                "lastError": self.last_error[name],
                "reports": m.reports if m else 0,
                "failures": m.failures if m else 0,
            }
        return {"sources": sources, "queueDepth": self.queue.qsize()}

    def _poll_loop(self, source: SourceConfig) -> None:
        next_poll: datetime | None = None
        while not self.stop_event.is_set():
            now = datetime.now(timezone.utc)
            next_poll = schedule_next(self.config, source.name, next_poll, now)
            wait = (next_poll - now).total_seconds()
            if wait > 0 and self.stop_event.wait(wait):
                return
            try:
                for record in self.fetcher.fetch(source, self.config.base_dir):
                    result = parse_payload(
                        record.payload, source, self.pipeline.warehouse, self.config.base_dir
                    )
                    for report in result.reports:
                        self._enqueue(report, source)
                self.last_success[source.name] = datetime.now(timezone.utc).isoformat()
                self.last_error[source.name] = None
            except (ValueError, OSError) as exc:
                logger.error("poll of %s failed: %s", source.name, exc)
                self.last_error[source.name] = str(exc)

    def _enqueue(self, report: Report, source: SourceConfig) -> None:
        while not self.stop_event.is_set():
            try:
                self.queue.put((report, source), timeout=0.2)
                return
            except queue.Full:
                continue

    def _worker_loop(self) -> None:
        while not (self.stop_event.is_set() and self.queue.empty()):
            try:
                report, source = self.queue.get(timeout=0.2)
            except queue.Empty:
                continue
            self.pipeline.ingest_report(report, source)
            self.queue.task_done()

    def start(self) -> None:
        self._server = http.server.ThreadingHTTPServer(
            ("127.0.0.1", self.config.health_port), _HealthHandler
        )
        self._server.service = self  # type: ignore[attr-defined]
        self.health_port = self._server.server_address[1]
        server_thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        server_thread.start()
        self.threads.append(server_thread)
        worker = threading.Thread(target=self._worker_loop, daemon=True)
        worker.start()
        self.threads.append(worker)
        for source in self.config.sources:
            t = threading.Thread(target=self._poll_loop, args=(source,), daemon=True)
            t.start()
            self.threads.append(t)
        logger.info("service up, health on port %d", self.health_port)

    def stop(self) -> None:
        self.stop_event.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def wait(self, timeout: float | None = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self.threads:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            t.join(remaining)
