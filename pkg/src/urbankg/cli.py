"""Command-line entry points.

Machine-readable output goes to stdout; logging and diagnostics go to
stderr.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

from .config import ENV_CONFIG, ConfigError, EngineConfig, load_config
from .inference import BackendError, StubRuleError
from .ingestion import parse_payload
from .ontology import GeoPoint, TimeInterval
from .pipeline import (
    METRICS_FILENAME,
    Pipeline,
    Service,
    build_pipeline,
    format_metrics_table,
    load_metrics,
    save_metrics,
)

logger = logging.getLogger(__name__)

EXPORT_FORMATS = ("nquads", "graphml", "cypher")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbankg",
        description="Multimodal urban data ingestion and knowledge graph engine.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase log level (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help=f"engine config path (default: ${ENV_CONFIG})")

    p = sub.add_parser("serve", help="poll sources continuously")
    add_config(p)
    p.add_argument("--health-port", type=int, help="health endpoint port (default from config)")

    p = sub.add_parser("replay", help="ingest fixture inputs in observed-time order")
    add_config(p)
    p.add_argument("--fixtures", help="fixture directory holding config.yaml and inputs")
    p.add_argument("--speedup", type=float, default=0.0,
                   help="replay pacing divisor; 0 ingests as fast as possible")

    p = sub.add_parser("ingest-file", help="parse and ingest one payload file")
    add_config(p)
    p.add_argument("--source", required=True, help="configured source name")
    p.add_argument("paths", nargs="+", help="payload files")

    p = sub.add_parser("export", help="dump the graph")
    add_config(p)
    p.add_argument("--format", choices=EXPORT_FORMATS, default="nquads")
    p.add_argument("-o", "--output", help="write here instead of stdout")

    p = sub.add_parser("incidents", help="query incidents")
    add_config(p)
    p.add_argument("--since", help="ISO start of the query window")
    p.add_argument("--until", help="ISO end of the query window")
    p.add_argument("--lat", type=float)
    p.add_argument("--lon", type=float)
    p.add_argument("--radius-km", type=float)

    p = sub.add_parser("stats", help="print the latest per-source latency table")
    add_config(p)
    return parser


def _load(args: argparse.Namespace) -> EngineConfig:
    path = args.config or os.environ.get(ENV_CONFIG)
    if getattr(args, "fixtures", None) and not args.config:
        path = str(Path(args.fixtures) / "config.yaml")
    if not path:
        raise ConfigError(f"no config given; pass --config or set {ENV_CONFIG}")
    return load_config(path)


def _close(pipeline: Pipeline) -> None:
    pipeline.store.close()


def cmd_serve(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.health_port is not None:
        config.health_port = args.health_port
    pipeline = build_pipeline(config)
    service = Service(pipeline)
    service.start()
    print(json.dumps({"healthPort": service.health_port}), flush=True)

    stopping = threading.Event()

    def _stop(signum, frame):
        logger.info("signal %d, shutting down", signum)
        stopping.set()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    try:
        while not stopping.is_set():
            time.sleep(0.2)
    finally:
        service.stop()
        service.wait(timeout=10.0)
        _close(pipeline)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    config = _load(args)
    pipeline = build_pipeline(config)
    try:
        result = pipeline.replay(speedup=args.speedup)
    finally:
        _close(pipeline)
    for name, stats in sorted(result.parse.items()):
        logger.info(
            "%s: %d rows, %d reports, %d skipped, %d outside region",
            name, stats.total, stats.emitted, stats.skipped, stats.filtered,
        )
        for err in stats.errors:
            logger.debug("%s: %s", name, err)
    save_metrics(result.metrics, pipeline.warehouse.root / METRICS_FILENAME)
    print(format_metrics_table(result.metrics, [s.name for s in config.sources]))
    return 0


def cmd_ingest_file(args: argparse.Namespace) -> int:
    config = _load(args)
    source = config.source(args.source)
    pipeline = build_pipeline(config)
    try:
        reports = []
        totals = {"total": 0, "emitted": 0, "skipped": 0, "filtered": 0}
        for path in args.paths:
            result = parse_payload(
                Path(path).read_bytes(), source, pipeline.warehouse, config.base_dir
            )
            for key in totals:
                totals[key] += getattr(result, key)
            reports.extend(result.reports)
        reports.sort(key=lambda r: (r.observed_at, r.id))
        for report in reports:
            pipeline.ingest_report(report, source)
        metrics = pipeline.metrics[source.name]
        totals.update({"ingested": metrics.reports, "failures": metrics.failures})
        print(json.dumps(totals, sort_keys=True))
    finally:
        _close(pipeline)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    config = _load(args)
    pipeline = build_pipeline(config)
    try:
        data = pipeline.store.export(args.format)
    finally:
        _close(pipeline)
    if args.output:
        Path(args.output).write_bytes(data)
        logger.info("wrote %d bytes to %s", len(data), args.output)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return 0


def cmd_incidents(args: argparse.Namespace) -> int:
    config = _load(args)
    pipeline = build_pipeline(config)
    try:
        def _ts(text: str) -> datetime:
            dt = datetime.fromisoformat(text)
            return dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)

        window = None
        if args.since or args.until:
            start = _ts(args.since) if args.since else datetime.min.replace(tzinfo=timezone.utc)
            end = _ts(args.until) if args.until else None
            window = TimeInterval(start, end)
        center = None
        if args.lat is not None and args.lon is not None:
            center = GeoPoint(args.lat, args.lon)
        contexts = pipeline.store.query_incidents(
            window=window,
            center=center,
            radius_km=args.radius_km,
            recent_limit=config.recent_report_limit,
            summary_max_chars=config.summary_max_chars,
        )
        for ctx in contexts:
            inc = ctx.incident
            print(json.dumps({
                "id": inc.id,
                "label": inc.label,
                "description": inc.description,
                "start": inc.interval.start.isoformat(),
                "end": inc.interval.end.isoformat() if inc.interval.end else None,
                "lat": inc.geo.lat if inc.geo else None,
                "lon": inc.geo.lon if inc.geo else None,
                "reports": [
                    {"id": r.report_id, "modality": r.modality, "summary": r.summary}
                    for r in ctx.recent_reports
                ],
            }, sort_keys=True))
    finally:
        _close(pipeline)
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    config = _load(args)
    pipeline = build_pipeline(config)
    try:
        path = pipeline.warehouse.root / METRICS_FILENAME
        if not path.exists():
            raise ConfigError(f"no saved metrics at {path}; run replay first")
        metrics = load_metrics(path)
        print(format_metrics_table(metrics, [s.name for s in config.sources]))
    finally:
        _close(pipeline)
    return 0


_COMMANDS = {
    "serve": cmd_serve,
    "replay": cmd_replay,
    "ingest-file": cmd_ingest_file,
    "export": cmd_export,
    "incidents": cmd_incidents,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, StubRuleError, BackendError) as exc:
        logger.error("%s", exc)
        return 1
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    except KeyboardInterrupt:
        return 0


def console_main() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_main()
