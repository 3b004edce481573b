from __future__ import annotations

import itertools
import json
import time
from datetime import datetime, timedelta, timezone

import pytest
import requests

from urbankg.config import ConfigError, load_config
from urbankg.graph_store import GraphStore, Node
from urbankg.inference import BackendUnreachable, StubBackend
from urbankg.ingestion import FileFetcher, content_id, parse_gdelt, parse_payload
from urbankg.ontology import (
    InferenceRecord,
    Modality,
    ModalitySegment,
    Report,
    TimeInterval,
)
from urbankg.pipeline import (
    CAPTION_INFERENCE_TYPE,
    IngestMetrics,
    PARSE_INFERENCE_TYPE,
    Pipeline,
    Service,
    build_backend,
    build_pipeline,
    format_metrics_table,
    load_metrics,
    save_metrics,
    series_key,
)
from urbankg.warehouse import Warehouse

UTC = timezone.utc
T0 = datetime(2025, 1, 7, 19, 0, tzinfo=UTC)


@pytest.fixture()
def la_pipeline(la_config):
    return build_pipeline(la_config)


def _gdelt_reports(la_config):
    src = la_config.source("gdelt")
    record = FileFetcher().fetch(src, la_config.base_dir)[0]
    return parse_gdelt(record.payload, src).reports, src


class TestHelpers:
    def test_series_key(self):
        report = Report(
            id="report:x", aggregator_id="aggregator:a", observer_id="observer:a:b",
            observed_at=T0, geo=None,
            segments=[ModalitySegment(Modality.TABULAR, "1.0", property="PM2.5", unit="x")],
        )
        assert series_key(report, report.segments[0]) == "observer:a:b:PM2.5"

    def test_report_summary_collects_text_and_inferences(self, la_pipeline):
        seg = ModalitySegment(Modality.TEXT, "smoke over ridge")
        seg.inferences.append(InferenceRecord("Trend Analysis", "obs: latest 5; normal"))
        report = Report(
            id="report:x", aggregator_id="aggregator:a", observer_id="observer:a:b",
            observed_at=T0, geo=None, segments=[seg],
        )
        summary = la_pipeline._report_summary(report)
        assert summary == "smoke over ridge | obs: latest 5; normal"

    def test_build_backend_rejects_unknown(self, la_config):
        la_config.backend = "oracle"
        with pytest.raises(ConfigError):
            build_backend(la_config)

    def test_build_pipeline_lays_out_state(self, la_config, la_pipeline):
        root = la_pipeline.warehouse.root
        la_pipeline.store.upsert_node(Node("actor:x", "Actor", {}))
        la_pipeline.index.add("incident:x", "text")
        assert (root / "graph.wal").exists()
        assert (root / "incident_index.jsonl").exists()


class TestIngestText:
    def test_gdelt_report_builds_graph(self, la_config, la_pipeline):
        reports, src = _gdelt_reports(la_config)
        la_pipeline.ingest_report(reports[0], src)

        store = la_pipeline.store
        report_node = store.get_node(reports[0].id)
        assert report_node is not None
        assert "sigmus:ingestFailed" not in report_node.properties

        actor_id = content_id("actor", "los angeles fire department")
        actor = store.get_node(actor_id)
        assert actor.properties["rdfs:label"] == "Los Angeles Fire Department"

        events = store.edges_from(reports[0].id, "sigmus:describesEvent")
        assert len(events) == 1
        event = store.get_node(events[0].dst)
        assert event.properties["sigmus:cameoEvent"] == "073"
        assert store.edges_from(event.id, "sigmus:actor1")[0].dst == actor_id

        evidence = store.edges_from(reports[0].id, "sigmus:evidenceOf")
        incident = store.get_node(evidence[0].dst)
        assert incident.properties["rdfs:label"] == "2025 Los Angeles Wildfires"

        seg_types = [inf.inference_type for inf in reports[0].segments[0].inferences]
        assert seg_types == [PARSE_INFERENCE_TYPE]

        m = la_pipeline.metrics["gdelt"]
        assert (m.reports, m.failures) == (1, 0)
        assert m.actor_merges == 1 and m.incident_merges == 1

    def test_latency_split_uses_clock(self, la_config):
        ticker = itertools.count()
        pipe = build_pipeline(la_config)
        pipe.clock = lambda: float(next(ticker))
        reports, src = _gdelt_reports(la_config)
        pipe.ingest_report(reports[0], src)
        m = pipe.metrics["gdelt"]
        # enrichment is bracketed by exactly one tick
        assert m.processing_total == 1.0
        assert m.kg_insert_total > 0.0
        assert m.actor_merge_total > 0.0 and m.incident_merge_total > 0.0


class TestIngestFailure:
    def test_bad_tabular_value_marks_report(self, la_config, la_pipeline):
        src = la_config.source("airquality")
        report = Report(
            id="report:bad", aggregator_id="aggregator:airquality",
            observer_id="observer:airquality:x", observed_at=T0, geo=None,
            segments=[ModalitySegment(Modality.TABULAR, "not-a-number",
                                      property="PM2.5", unit="µg/m³")],
        )
        la_pipeline.ingest_report(report, src)
        m = la_pipeline.metrics["airquality"]
        assert (m.reports, m.failures) == (0, 1)
        assert m.processing_total == 0.0 and m.kg_insert_total == 0.0
        node = la_pipeline.store.get_node("report:bad")
        assert node.properties["sigmus:ingestFailed"] is True
        assert "could not convert" in node.properties["sigmus:failureReason"]

    def test_backend_outage_marks_report(self, la_config):
        class Down:
            def complete(self, request, prompt):
                raise BackendUnreachable(request.task.value, "offline")

        la_config.backend_retries = 0
        la_config.backend_backoff = 0.0
        pipe = build_pipeline(la_config)
        pipe.backend = Down()
        reports, src = _gdelt_reports(la_config)
        pipe.ingest_report(reports[0], src)
        m = pipe.metrics["gdelt"]
        assert (m.reports, m.failures) == (0, 1)
        node = pipe.store.get_node(reports[0].id)
        assert node.properties["sigmus:ingestFailed"] is True
        assert "offline" in node.properties["sigmus:failureReason"]


class TestIngestImageAndLink:
    def test_cctv_report_links_to_incident(self, la_config, la_pipeline):
        reports, gdelt_src = _gdelt_reports(la_config)
        la_pipeline.ingest_report(reports[1], gdelt_src)  # creates Palisades Fire

        cctv_src = la_config.source("cctv")
        record = FileFetcher().fetch(cctv_src, la_config.base_dir)[0]
        cctv = parse_payload(record.payload, cctv_src, la_pipeline.warehouse,
                             la_config.base_dir)
        smoky = cctv.reports[0]  # pch frame with the smoke sidecar
        assert smoky.segments[0].annotation
        la_pipeline.ingest_report(smoky, cctv_src)

        inferences = smoky.segments[0].inferences
        assert inferences[0].inference_type == CAPTION_INFERENCE_TYPE
        assert "smoke" in inferences[0].inference_result.lower()

        links = la_pipeline.store.edges_from(smoky.id, "sigmus:evidenceOf")
        assert len(links) == 1
        target = la_pipeline.store.get_node(links[0].dst)
        assert target.properties["rdfs:label"] == "Palisades Fire"
        assert links[0].properties.get("sigmus:rationale")

    def test_quiet_frame_links_nothing(self, la_config, la_pipeline):
        reports, gdelt_src = _gdelt_reports(la_config)
        la_pipeline.ingest_report(reports[1], gdelt_src)
        cctv_src = la_config.source("cctv")
        record = FileFetcher().fetch(cctv_src, la_config.base_dir)[0]
        cctv = parse_payload(record.payload, cctv_src, la_pipeline.warehouse,
                             la_config.base_dir)
        quiet = [r for r in cctv.reports if not r.segments[0].annotation][0]
        la_pipeline.ingest_report(quiet, cctv_src)
        assert la_pipeline.store.edges_from(quiet.id, "sigmus:evidenceOf") == []
        m = la_pipeline.metrics["cctv"]
        assert m.failures == 0 and m.reports == 1


class TestIngestTabular:
    def test_first_point_renders_normal(self, la_config, la_pipeline):
        src = la_config.source("airquality")
        report = Report(
            id="report:aq1", aggregator_id="aggregator:airquality",
            observer_id="observer:airquality:98211", observed_at=T0, geo=None,
            segments=[ModalitySegment(Modality.TABULAR, "12.1",
                                      property="PM2.5", unit="µg/m³")],
        )
        la_pipeline.ingest_report(report, src)
        rec = report.segments[0].inferences[0]
        assert rec.inference_type == "Trend Analysis"
        assert rec.inference_result.endswith("; normal")
        key = "observer:airquality:98211:PM2.5"
        pts = la_pipeline.warehouse.range_query(key, T0 - timedelta(hours=1),
                                                T0 + timedelta(hours=1))
        assert [p.value for p in pts] == [12.1]


class TestReplay:
    def _spy(self, pipe):
        seen = []
        pipe.ingest_report = lambda report, source: seen.append(
            (report.observed_at, report.id, source.name)
        )
        return seen

    def test_global_time_order(self, la_config, la_pipeline):
        seen = self._spy(la_pipeline)
        result = la_pipeline.replay()
        assert len(seen) == sum(s.emitted for s in result.parse.values())
        assert seen == sorted(seen, key=lambda item: (item[0], item[1]))
        assert result.parse["gdelt"].filtered == 1
        assert {s for _, _, s in seen} == {"gdelt", "pems", "cctv", "weather", "airquality"}

    def test_speedup_sleeps_scaled_gaps(self, la_config, la_pipeline):
        seen = self._spy(la_pipeline)
        naps = []
        la_pipeline.replay(speedup=60.0, sleep=naps.append)
        stamps = sorted({at for at, _, _ in seen})
        assert len(naps) == len(stamps) - 1
        assert all(n > 0 for n in naps)
        span = (stamps[-1] - stamps[0]).total_seconds()
        assert sum(naps) == pytest.approx(span / 60.0)


class TestMetricsTable:
    def test_exact_layout(self):
        metrics = {
            "gdelt": IngestMetrics("gdelt", reports=2, processing_total=0.5,
                                   kg_insert_total=0.25),
            "cctv": IngestMetrics("cctv"),
        }
        table = format_metrics_table(metrics, ["gdelt", "cctv"])
        lines = table.splitlines()
        assert lines[0] == "| Data Source | Processing Latency (s) | KG insert latency (s) |"
        assert lines[1] == "|-------------|------------------------|-----------------------|"
        assert lines[2] == "| gdelt       |                 0.2500 |                0.1250 |"
        assert lines[3] == "| cctv        |                 0.0000 |                0.0000 |"

    def test_kg_insert_column(self):
        metrics = {"pems": IngestMetrics("pems", reports=4, kg_insert_total=1.0)}
        table = format_metrics_table(metrics, ["pems"])
        assert "0.2500" in table.splitlines()[2]

    def test_missing_source_renders_zeros(self):
        table = format_metrics_table({}, ["ghost"])
        assert "| ghost" in table and "0.0000" in table

    def test_headers_only_when_no_sources(self):
        lines = format_metrics_table({}, []).splitlines()
        assert len(lines) == 2


class TestMetricsPersistence:
    def test_round_trip(self, tmp_path):
        metrics = {
            "gdelt": IngestMetrics("gdelt", reports=3, failures=1,
                                   processing_total=0.125, kg_insert_total=0.5,
                                   actor_merges=2, actor_merge_total=0.25,
                                   incident_merges=1, incident_merge_total=0.0625),
            "cctv": IngestMetrics("cctv"),
        }
        path = tmp_path / "metrics.tsv"
        save_metrics(metrics, path)
        assert load_metrics(path) == metrics

    def test_empty_file(self, tmp_path):
        path = tmp_path / "metrics.tsv"
        path.write_text("")
        assert load_metrics(path) == {}


SERVICE_CONFIG = """\
backend: stub
warehouse_root: state
sources:
  - name: airquality
    format: airquality
    poll_interval: 1h
    input: air.json
"""


@pytest.fixture()
def service_env(tmp_path):
    (tmp_path / "config.yaml").write_text(SERVICE_CONFIG)
    entries = [
        {"sensor_index": 98211, "last_seen": 1736276400 + i * 3600,
         "latitude": 34.06, "longitude": -118.53, "pm2.5": 12.0 + i}
        for i in range(3)
    ]
    (tmp_path / "air.json").write_text(json.dumps({"sensors": entries}))
    return load_config(tmp_path / "config.yaml")


class TestService:
    def _wait_for(self, predicate, timeout=10.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate():
                return
            time.sleep(0.05)
        raise AssertionError("service did not settle in time")

    def test_polls_ingests_and_reports_health(self, service_env):
        service = Service(build_pipeline(service_env))
        service.start()
        try:
            self._wait_for(
                lambda: service.health()["sources"]["airquality"]["reports"] == 3
            )
            doc = requests.get(
                f"http://127.0.0.1:{service.health_port}/health", timeout=5
            ).json()
            assert doc["sources"]["airquality"]["failures"] == 0
            assert doc["sources"]["airquality"]["lastSuccess"]
            assert doc["sources"]["airquality"]["lastError"] is None
            assert doc["queueDepth"] == 0
            missing = requests.get(
                f"http://127.0.0.1:{service.health_port}/nope", timeout=5
            )
            assert missing.status_code == 404
        finally:
            service.stop()
        service.wait(10)
        assert all(not t.is_alive() for t in service.threads)
