"""In-process property graph with a durable log and round-trippable exports.

Nodes carry an ontology class label plus a property map; property values
are scalars or lists of scalars (lists hold things like alternate
labels).  All mutation goes through a single internal lock, which is what
gives readers a consistent view without callers coordinating anything.

When opened with a WAL path, every mutation is appended to a
length-prefixed record log and replayed on open, so a store can be
rebuilt after a crash or reopened by a later CLI invocation.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import threading
import urllib.parse
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable

from .ontology import (
    CLASSES,
    EDGE_PREDICATES,
    EntityId,
    GeoPoint,
    Incident,
    Ref,
    TimeInterval,
    Triple,
    VOCABULARY,
)

logger = logging.getLogger(__name__)

Scalar = str | int | float | bool
PropertyValue = Scalar | list[Scalar]

_NODE_IRI = "urn:x-ukg:n:"
_EDGE_IRI = "urn:x-ukg:e:"
_LIST_MARK = "<urn:x-ukg:list>"
_GRAPHML_NS = "http://graphml.graphdrawing.org/xmlns"

EARTH_RADIUS_KM = 6371.0088


class GraphError(ValueError):
    """Raised on contract violations: dangling edges, bad classes, bad formats."""


@dataclass
class Node:
    id: EntityId
    class_label: str
    properties: dict[str, PropertyValue] = field(default_factory=dict)


@dataclass
class Edge:
    src: EntityId
    predicate: str
    dst: EntityId
    properties: dict[str, PropertyValue] = field(default_factory=dict)


@dataclass
class ReportSummary:
    report_id: EntityId
    modality: str
    summary: str


@dataclass
class IncidentContext:
    incident: Incident
    recent_reports: list[ReportSummary]


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance between two points in kilometres."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def _check_scalar(v: Scalar) -> None:
    if not isinstance(v, (str, int, float, bool)):
        raise GraphError(f"unsupported property value type {type(v).__name__}")
    if isinstance(v, float) and not math.isfinite(v):
        raise GraphError("non-finite float property value")


def _check_properties(props: dict[str, PropertyValue]) -> None:
    for key, value in props.items():
        if not isinstance(key, str) or not key:
            raise GraphError("property keys must be non-empty strings")
        items = value if isinstance(value, list) else [value]
        for item in items:
            _check_scalar(item)


def _copy_props(props: dict[str, PropertyValue]) -> dict[str, PropertyValue]:
    return {k: list(v) if isinstance(v, list) else v for k, v in props.items()}


class GraphStore:
    """Single-writer in-memory graph, optionally backed by a WAL file."""

    def __init__(self, wal_path: str | os.PathLike[str] | None = None):
        self._lock = threading.RLock()
        self._nodes: dict[EntityId, Node] = {}
        self._edges: dict[tuple[EntityId, str, EntityId], Edge] = {}
        self._out: dict[EntityId, set[tuple[EntityId, str, EntityId]]] = {}
        self._in: dict[EntityId, set[tuple[EntityId, str, EntityId]]] = {}
        self._wal_path = os.fspath(wal_path) if wal_path is not None else None
        self._wal_fh = None
        if self._wal_path is not None:
            self._replay_wal()
            self._wal_fh = open(self._wal_path, "ab")

    # -- durability ---------------------------------------------------------

    def _replay_wal(self) -> None:
        if not self._wal_path or not os.path.exists(self._wal_path):
            return
        applied = 0
        with open(self._wal_path, "rb") as fh:
            while True:
                header = fh.read(4)
                if len(header) < 4:
                    break
                (length,) = struct.unpack(">I", header)
                payload = fh.read(length)
                if len(payload) < length:
                    logger.warning("wal truncated mid-record, stopping replay")
                    break
                try:
                    record = json.loads(payload.decode("utf-8"))
                    self._apply(record)
                    applied += 1
                except (ValueError, GraphError) as exc:
                    logger.warning("wal record %d unreadable (%s), stopping replay", applied, exc)
                    break
        logger.debug("wal replay applied %d records", applied)

    def _log(self, record: dict) -> None:
        if self._wal_fh is None:
            return
        payload = json.dumps(record, sort_keys=True).encode("utf-8")
        self._wal_fh.write(struct.pack(">I", len(payload)) + payload)
        self._wal_fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._wal_fh is not None:
                self._wal_fh.close()
                self._wal_fh = None

    def _apply(self, record: dict) -> None:
        op = record.get("op")
        if op == "node":
            self._upsert_node(record["id"], record["class"], record["props"], log=False)
        elif op == "edge":
            self._upsert_edge(record["src"], record["pred"], record["dst"], record["props"], log=False)
        elif op == "merge":
            self._merge(record["survivor"], record["absorbed"], record["alt"], log=False)
        else:
            raise GraphError(f"unknown wal op {op!r}")

    # -- mutation -----------------------------------------------------------

    def upsert_node(self, node: Node) -> None:
        """Insert or update a node. Class changes on an existing id are rejected."""
        if node.class_label not in CLASSES:
            raise GraphError(f"classLabel {node.class_label!r} is not an ontology class")
        if not node.id:
            raise GraphError("node id empty")
        _check_properties(node.properties)
        with self._lock:
            self._upsert_node(node.id, node.class_label, node.properties, log=True)

    def _upsert_node(self, node_id: str, class_label: str, props: dict, log: bool) -> None:
        existing = self._nodes.get(node_id)
        if existing is not None and existing.class_label != class_label:
            raise GraphError(
                f"node {node_id} already stored as {existing.class_label}, not {class_label}"
            )
        if existing is None:
            self._nodes[node_id] = Node(node_id, class_label, _copy_props(props))
            self._out.setdefault(node_id, set())
            self._in.setdefault(node_id, set())
        else:
            existing.properties.update(_copy_props(props))
        if log:
            self._log({"op": "node", "id": node_id, "class": class_label, "props": props})

    def upsert_edge(self, edge: Edge) -> None:
        """Insert or update an edge. Both endpoints must already exist."""
        if edge.predicate not in EDGE_PREDICATES:
            raise GraphError(f"predicate {edge.predicate!r} not in the edge vocabulary")
        _check_properties(edge.properties)
        with self._lock:
            if edge.src not in self._nodes:
                raise GraphError(f"edge source {edge.src!r} not in graph")
            if edge.dst not in self._nodes:
                raise GraphError(f"edge target {edge.dst!r} not in graph")
            self._upsert_edge(edge.src, edge.predicate, edge.dst, edge.properties, log=True)

    def _upsert_edge(self, src: str, pred: str, dst: str, props: dict, log: bool) -> None:
        key = (src, pred, dst)
        existing = self._edges.get(key)
        if existing is None:
            self._edges[key] = Edge(src, pred, dst, _copy_props(props))
            self._out.setdefault(src, set()).add(key)
            self._in.setdefault(dst, set()).add(key)
        else:
            existing.properties.update(_copy_props(props))
        if log:
            self._log({"op": "edge", "src": src, "pred": pred, "dst": dst, "props": props})

    def upsert_triples(self, triples: Iterable[Triple]) -> None:
        """Store ontology triples: rdf:type rows become nodes, refs become edges."""
        rows = list(triples)
        with self._lock:
            for tr in rows:
                if tr.predicate == "rdf:type":
                    label = str(tr.obj).split(":", 1)[-1]
                    if tr.subject not in self._nodes:
                        self._upsert_node(tr.subject, label, {}, log=True)
            for tr in rows:
                if tr.predicate == "rdf:type":
                    continue
                if isinstance(tr.obj, Ref):
                    if tr.obj.id not in self._nodes:
                        raise GraphError(f"edge target {tr.obj.id!r} not in graph")
                    self._upsert_edge(tr.subject, tr.predicate, tr.obj.id, {}, log=True)
                    continue
                node = self._nodes.get(tr.subject)
                if node is None:
                    raise GraphError(f"literal triple for unknown subject {tr.subject!r}")
                current = node.properties.get(tr.predicate)
                if current is None:
                    node.properties[tr.predicate] = tr.obj
                elif isinstance(current, list):
                    if tr.obj not in current:
                        current.append(tr.obj)
                elif current != tr.obj:
                    # second distinct value for the predicate, promote to list
                    node.properties[tr.predicate] = [current, tr.obj]
                self._log(
                    {
                        "op": "node",
                        "id": tr.subject,
                        "class": node.class_label,
                        "props": {tr.predicate: node.properties[tr.predicate]},
                    }
                )

    def merge_nodes(self, survivor: EntityId, absorbed: EntityId,
                    alt_label_property: str = "sigmus:altLabel") -> None:
        """Fold ``absorbed`` into ``survivor``.

        Edges are rehomed onto the survivor (duplicates collapse, would-be
        self edges are dropped), the absorbed label joins the survivor's
        alternate-label list, list-valued bookkeeping properties are
        unioned, and the absorbed node disappears.  Merging a node with
        itself is a no-op.
        """
        with self._lock:
            if survivor not in self._nodes:
                raise GraphError(f"survivor {survivor!r} not in graph")
            if absorbed not in self._nodes:
                raise GraphError(f"absorbed {absorbed!r} not in graph")
            self._merge(survivor, absorbed, alt_label_property, log=True)

    def _append_unique(self, node: Node, key: str, values: list[Scalar], skip: Scalar | None) -> None:
        current = node.properties.get(key)
        if current is None:
            current = []
        elif not isinstance(current, list):
            current = [current]
        for value in values:
            if value != skip and value not in current:
                current.append(value)
        if current:
            node.properties[key] = current

    def _merge(self, survivor: str, absorbed: str, alt: str, log: bool) -> None:
        if survivor == absorbed:
            return
        surv = self._nodes[survivor]
        gone = self._nodes[absorbed]
        if surv.class_label != gone.class_label:
            raise GraphError(
                f"cannot merge {gone.class_label} {absorbed!r} into {surv.class_label} {survivor!r}"
            )

        for key in list(self._out.get(absorbed, ())):
            _, pred, dst = key
            edge = self._edges.pop(key)
            self._out[absorbed].discard(key)
            self._in[dst].discard(key)
            new_dst = survivor if dst == absorbed else dst
            if new_dst == survivor:
                continue  # self edge, drop
            self._upsert_edge(survivor, pred, new_dst, edge.properties, log=False)
        for key in list(self._in.get(absorbed, ())):
            src, pred, _ = key
            edge = self._edges.pop(key)
            self._in[absorbed].discard(key)
            self._out[src].discard(key)
            if src == survivor:
                continue  # self edge, drop
            self._upsert_edge(src, pred, survivor, edge.properties, log=False)

        own_label = surv.properties.get("rdfs:label")
        gone_label = gone.properties.get("rdfs:label")
        gone_labels = gone_label if isinstance(gone_label, list) else (
            [gone_label] if gone_label is not None else []
        )
        self._append_unique(surv, alt, gone_labels, skip=own_label)
        for list_key in (alt, "sigmus:altName", "sigmus:sourceReport"):
            extra = gone.properties.get(list_key)
            if extra is None:
                continue
            extra_list = extra if isinstance(extra, list) else [extra]
            skip = own_label if list_key != "sigmus:sourceReport" else None
            self._append_unique(surv, list_key, extra_list, skip=skip)

        del self._nodes[absorbed]
        self._out.pop(absorbed, None)
        self._in.pop(absorbed, None)
        if log:
            self._log({"op": "merge", "survivor": survivor, "absorbed": absorbed, "alt": alt})

    # -- reads --------------------------------------------------------------

    def get_node(self, node_id: EntityId) -> Node | None:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                return None
            return Node(node.id, node.class_label, _copy_props(node.properties))

    def nodes_by_class(self, class_label: str) -> list[Node]:
        with self._lock:
            return [
                Node(n.id, n.class_label, _copy_props(n.properties))
                for n in self._nodes.values()
                if n.class_label == class_label
            ]

    def edges_from(self, node_id: EntityId, predicate: str | None = None) -> list[Edge]:
        with self._lock:
            keys = sorted(self._out.get(node_id, ()))
            return [
                Edge(*k, _copy_props(self._edges[k].properties))
                for k in keys
                if predicate is None or k[1] == predicate
            ]

    def edges_to(self, node_id: EntityId, predicate: str | None = None) -> list[Edge]:
        with self._lock:
            keys = sorted(self._in.get(node_id, ()))
            return [
                Edge(*k, _copy_props(self._edges[k].properties))
                for k in keys
                if predicate is None or k[1] == predicate
            ]

    def all_edges(self) -> list[Edge]:
        with self._lock:
            return [Edge(*k, _copy_props(e.properties)) for k, e in sorted(self._edges.items())]

    def node_count(self) -> int:
        with self._lock:
            return len(self._nodes)

    def edge_count(self) -> int:
        with self._lock:
            return len(self._edges)

    def snapshot(self) -> tuple[dict, dict]:
        """Plain-data copy of the graph, handy for equality checks."""
        with self._lock:
            nodes = {
                nid: (n.class_label, _copy_props(n.properties))
                for nid, n in self._nodes.items()
            }
            edges = {k: _copy_props(e.properties) for k, e in self._edges.items()}
            return nodes, edges

    def incident_from_node(self, node: Node) -> Incident:
        props = node.properties
        label = props.get("rdfs:label", "")
        start_raw = props.get("time:hasBeginning")
        end_raw = props.get("time:hasEnd")
        src = props.get("sigmus:sourceReport", [])
        src_list = src if isinstance(src, list) else [src]
        lat, lon = props.get("sigmus:lat"), props.get("sigmus:lon")
        geo = None
        if lat is not None and lon is not None:
            place = props.get("sigmus:placeName")
            geo = GeoPoint(float(lat), float(lon), str(place) if place is not None else None)
        return Incident(
            node.id,
            str(label if not isinstance(label, list) else label[0]),
            str(props.get("rdfs:comment", "")),
            TimeInterval(
                datetime.fromisoformat(str(start_raw)),
                datetime.fromisoformat(str(end_raw)) if end_raw is not None else None,
            ),
            geo=geo,
            source_report_ids=[str(s) for s in src_list],
        )

    def query_incidents(
        self,
        window: TimeInterval | None = None,
        center: GeoPoint | None = None,
        radius_km: float | None = None,
        recent_limit: int = 5,
        summary_max_chars: int = 500,
    ) -> list[IncidentContext]:
        """Incidents overlapping a time window and region, newest first.

        Incidents without coordinates match any region.  Each hit carries
        up to ``recent_limit`` of its most recent evidence report
        summaries, truncated to ``summary_max_chars``.
        """
        with self._lock:
            hits: list[tuple[datetime, str, IncidentContext]] = []
            for node in self._nodes.values():
                if node.class_label != "Incident":
                    continue
                try:
                    incident = self.incident_from_node(node)
                except (ValueError, TypeError) as exc:
                    logger.warning("incident node %s unreadable: %s", node.id, exc)
                    continue
                if window is not None:
                    if window.end is not None and incident.interval.start > window.end:
                        continue
                    if incident.interval.end is not None and incident.interval.end < window.start:
                        continue
                if center is not None and radius_km is not None and incident.geo is not None:
                    d = haversine_km(center.lat, center.lon, incident.geo.lat, incident.geo.lon)
                    if d > radius_km:
                        continue
                reports = self._recent_reports(node.id, recent_limit, summary_max_chars)
                hits.append((incident.interval.start, incident.id, IncidentContext(incident, reports)))
            hits.sort(key=lambda h: h[1])
            hits.sort(key=lambda h: h[0], reverse=True)
            return [h[2] for h in hits]

    def _recent_reports(self, incident_id: str, limit: int, max_chars: int) -> list[ReportSummary]:
        rows: list[tuple[str, str, str, str]] = []
        for key in self._in.get(incident_id, ()):
            src, pred, _ = key
            if pred != "sigmus:evidenceOf":
                continue
            report = self._nodes.get(src)
            if report is None or report.class_label != "Report":
                continue
            observed = str(report.properties.get("sigmus:observedAt", ""))
            kinds: list[str] = []
            pieces: list[str] = []
            for seg_key in sorted(self._out.get(src, ())):
                if seg_key[1] != "sigmus:hasModality":
                    continue
                seg = self._nodes.get(seg_key[2])
                if seg is None:
                    continue
                kind = str(seg.properties.get("sigmus:modalityKind", ""))
                if kind:
                    kinds.append(kind)
                if kind == "text":
                    pieces.append(str(seg.properties.get("qudt:value", "")))
                for inf_key in sorted(self._out.get(seg_key[2], ())):
                    if inf_key[1] != "sigmus:hasInference":
                        continue
                    inf = self._nodes.get(inf_key[2])
                    if inf is not None:
                        pieces.append(str(inf.properties.get("sigmus:inferenceResult", "")))
            summary = " | ".join(p for p in pieces if p)[:max_chars]
            rows.append((observed, src, "+".join(sorted(set(kinds))), summary))
        rows.sort(reverse=True)
        return [ReportSummary(rid, kind, summary) for _, rid, kind, summary in rows[:limit]]

    def has_cycle(self, predicate: str = "sigmus:isPartOf") -> bool:
        """True when the given predicate's edges contain a directed cycle."""
        with self._lock:
            adjacency: dict[str, list[str]] = {}
            for src, pred, dst in self._edges:
                if pred == predicate:
                    adjacency.setdefault(src, []).append(dst)
            state: dict[str, int] = {}

            def visit(node: str) -> bool:
                state[node] = 1
                for nxt in adjacency.get(node, ()):
                    mark = state.get(nxt, 0)
                    if mark == 1:
                        return True
                    if mark == 0 and visit(nxt):
                        return True
                state[node] = 2
                return False

            return any(state.get(n, 0) == 0 and visit(n) for n in list(adjacency))

    def would_cycle(self, src: EntityId, dst: EntityId, predicate: str = "sigmus:isPartOf") -> bool:
        """Would adding src -> dst close a cycle over ``predicate`` edges?"""
        if src == dst:
            return True
        with self._lock:
            seen = {dst}
            stack = [dst]
            while stack:
                here = stack.pop()
                for key in self._out.get(here, ()):
                    if key[1] != predicate:
                        continue
                    nxt = key[2]
                    if nxt == src:
                        return True
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            return False

    # -- export / import ----------------------------------------------------

    def export(self, fmt: str) -> bytes:
        """Serialize the whole graph. Formats: nquads, graphml, cypher."""
        with self._lock:
            if fmt == "nquads":
                return self._export_nquads()
            if fmt == "graphml":
                return self._export_graphml()
            if fmt == "cypher":
                return self._export_cypher()
        raise GraphError(f"unsupported export format {fmt!r}")

    @staticmethod
    def _iri(prefix: str, *parts: str) -> str:
        return prefix + ";".join(urllib.parse.quote(p, safe="") for p in parts)

    @staticmethod
    def _literal(value: Scalar) -> str:
        if isinstance(value, bool):
            return f'"{"true" if value else "false"}"^^<http://www.w3.org/2001/XMLSchema#boolean>'
        if isinstance(value, int):
            return f'"{value}"^^<http://www.w3.org/2001/XMLSchema#integer>'
        if isinstance(value, float):
            return f'"{value!r}"^^<http://www.w3.org/2001/XMLSchema#double>'
        escaped = (
            value.replace("\\", "\\\\")
            .replace('"', '\\"')
            .replace("\n", "\\n")
            .replace("\r", "\\r")
            .replace("\t", "\\t")
        )
        return f'"{escaped}"'

    @staticmethod
    def _parse_literal(text: str) -> Scalar:
        if text.endswith(">") and "^^<" in text:
            body, dtype = text.rsplit("^^<", 1)
            dtype = dtype[:-1]
            raw = body[1:-1]
            if dtype.endswith("boolean"):
                return raw == "true"
            if dtype.endswith("integer"):
                return int(raw)
            if dtype.endswith("double"):
                return float(raw)
            raise GraphError(f"unsupported literal datatype {dtype!r}")
        raw = text[1:-1]
        out: list[str] = []
        i = 0
        while i < len(raw):
            ch = raw[i]
            if ch == "\\" and i + 1 < len(raw):
                nxt = raw[i + 1]
                mapped = {"\\": "\\", '"': '"', "n": "\n", "r": "\r", "t": "\t"}.get(nxt)
                if mapped is None:
                    raise GraphError(f"bad escape \\{nxt}")
                out.append(mapped)
                i += 2
            else:
                out.append(ch)
                i += 1
        return "".join(out)

    @staticmethod
    def _predicate_iri(curie: str) -> str:
        iri = VOCABULARY.get(curie)
        if iri is None:
            # ad-hoc property keys still need to round trip
            iri = "urn:x-ukg:p:" + urllib.parse.quote(curie, safe="")
        return iri

    @staticmethod
    def _predicate_curie(iri: str, lineno: int) -> str:
        curie = _CURIE_BY_IRI.get(iri)
        if curie is not None:
            return curie
        if iri.startswith("urn:x-ukg:p:"):
            return urllib.parse.unquote(iri[len("urn:x-ukg:p:"):])
        raise GraphError(f"line {lineno}: unknown predicate {iri}")

    def _export_nquads(self) -> bytes:
        lines: list[str] = []
        rdf_type = VOCABULARY["rdf:type"]
        for nid in sorted(self._nodes):
            node = self._nodes[nid]
            subj = self._iri(_NODE_IRI, nid)
            lines.append(f"<{subj}> <{rdf_type}> <urn:sigmus:{node.class_label}> .")
            for key in sorted(node.properties):
                value = node.properties[key]
                values = value if isinstance(value, list) else [value]
                pred = self._predicate_iri(key)
                marker = f" {_LIST_MARK}" if isinstance(value, list) else ""
                for item in values:
                    lines.append(f"<{subj}> <{pred}> {self._literal(item)}{marker} .")
        for key in sorted(self._edges):
            src, pred, dst = key
            edge = self._edges[key]
            s = self._iri(_NODE_IRI, src)
            o = self._iri(_NODE_IRI, dst)
            lines.append(f"<{s}> <{self._predicate_iri(pred)}> <{o}> .")
            if edge.properties:
                subj = self._iri(_EDGE_IRI, src, pred, dst)
                for pk in sorted(edge.properties):
                    pv = edge.properties[pk]
                    items = pv if isinstance(pv, list) else [pv]
                    marker = f" {_LIST_MARK}" if isinstance(pv, list) else ""
                    for item in items:
                        lines.append(
                            f"<{subj}> <{self._predicate_iri(pk)}> {self._literal(item)}{marker} ."
                        )
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")

    @classmethod
    def import_nquads(cls, data: bytes, wal_path: str | None = None) -> "GraphStore":
        """Rebuild a store from an nquads export. Inverse of export("nquads")."""
        store = cls(wal_path)
        node_props: list[tuple[str, str, Scalar, bool]] = []
        edge_props: list[tuple[tuple[str, str, str], str, Scalar, bool]] = []
        edges: list[tuple[str, str, str]] = []

        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphError(f"nquads input is not utf-8: {exc}") from exc
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            terms = _split_nquad(line, lineno)
            if len(terms) == 3:
                subj, pred, obj = terms
                graph_term = None
            elif len(terms) == 4:
                subj, pred, obj, graph_term = terms
            else:
                raise GraphError(f"line {lineno}: expected 3 or 4 terms, got {len(terms)}")
            is_list = graph_term == _LIST_MARK

            if not subj.startswith("<") or not pred.startswith("<"):
                raise GraphError(f"line {lineno}: subject and predicate must be IRIs")
            subj_iri = subj[1:-1]
            pred_iri = pred[1:-1]

            if subj_iri.startswith(_NODE_IRI):
                node_id = urllib.parse.unquote(subj_iri[len(_NODE_IRI):])
                if pred_iri == VOCABULARY["rdf:type"]:
                    label = obj[1:-1].split(":")[-1]
                    if label not in CLASSES:
                        raise GraphError(f"line {lineno}: unknown class {label!r}")
                    store._upsert_node(node_id, label, {}, log=True)
                    continue
                curie = cls._predicate_curie(pred_iri, lineno)
                if obj.startswith("<"):
                    dst_iri = obj[1:-1]
                    if not dst_iri.startswith(_NODE_IRI):
                        raise GraphError(f"line {lineno}: edge target is not a node IRI")
                    edges.append((node_id, curie, urllib.parse.unquote(dst_iri[len(_NODE_IRI):])))
                else:
                    node_props.append((node_id, curie, cls._parse_literal(obj), is_list))
            elif subj_iri.startswith(_EDGE_IRI):
                parts = [urllib.parse.unquote(p) for p in subj_iri[len(_EDGE_IRI):].split(";")]
                if len(parts) != 3:
                    raise GraphError(f"line {lineno}: malformed edge IRI")
                curie = cls._predicate_curie(pred_iri, lineno)
                edge_props.append(((parts[0], parts[1], parts[2]), curie, cls._parse_literal(obj), is_list))
            else:
                raise GraphError(f"line {lineno}: unknown subject IRI {subj_iri}")

        for node_id, curie, value, is_list in node_props:
            node = store._nodes.get(node_id)
            if node is None:
                raise GraphError(f"property for unknown node {node_id!r}")
            _accumulate(node.properties, curie, value, is_list)
        for src, pred, dst in edges:
            if src not in store._nodes or dst not in store._nodes:
                raise GraphError(f"edge {src!r} -{pred}-> {dst!r} references a missing node")
            store._upsert_edge(src, pred, dst, {}, log=True)
        for key, curie, value, is_list in edge_props:
            edge = store._edges.get(key)
            if edge is None:
                raise GraphError(f"property for unknown edge {key!r}")
            _accumulate(edge.properties, curie, value, is_list)
        return store

    def _export_graphml(self) -> bytes:
        ET.register_namespace("", _GRAPHML_NS)
        root = ET.Element(f"{{{_GRAPHML_NS}}}graphml")
        key_ids: dict[tuple[str, str], str] = {}

        def key_id(name: str, domain: str) -> str:
            found = key_ids.get((domain, name))
            if found is not None:
                return found
            kid = f"k{len(key_ids)}"
            key_ids[(domain, name)] = kid
            el = ET.SubElement(root, f"{{{_GRAPHML_NS}}}key")
            el.set("id", kid)
            el.set("for", domain)
            el.set("attr.name", name)
            el.set("attr.type", "string")
            return kid

        graph = ET.Element(f"{{{_GRAPHML_NS}}}graph")
        graph.set("id", "G")
        graph.set("edgedefault", "directed")

        label_key = key_id("classLabel", "node")
        pred_key = key_id("predicate", "edge")
        for nid in sorted(self._nodes):
            node = self._nodes[nid]
            el = ET.SubElement(graph, f"{{{_GRAPHML_NS}}}node")
            el.set("id", nid)
            data = ET.SubElement(el, f"{{{_GRAPHML_NS}}}data")
            data.set("key", label_key)
            data.text = node.class_label
            for pk in sorted(node.properties):
                data = ET.SubElement(el, f"{{{_GRAPHML_NS}}}data")
                data.set("key", key_id(pk, "node"))
                data.text = json.dumps(node.properties[pk], sort_keys=True)
        for i, key in enumerate(sorted(self._edges)):
            src, pred, dst = key
            el = ET.SubElement(graph, f"{{{_GRAPHML_NS}}}edge")
            el.set("id", f"e{i}")
            el.set("source", src)
            el.set("target", dst)
            data = ET.SubElement(el, f"{{{_GRAPHML_NS}}}data")
            data.set("key", pred_key)
            data.text = pred
            for pk in sorted(self._edges[key].properties):
                data = ET.SubElement(el, f"{{{_GRAPHML_NS}}}data")
                data.set("key", key_id(pk, "edge"))
                data.text = json.dumps(self._edges[key].properties[pk], sort_keys=True)
        root.append(graph)
        return ET.tostring(root, encoding="utf-8", xml_declaration=True)

    @staticmethod
    def _cypher_value(value: PropertyValue) -> str:
        if isinstance(value, list):
            return "[" + ", ".join(GraphStore._cypher_value(v) for v in value) + "]"
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (int, float)):
            return repr(value)
        escaped = value.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"

    def _export_cypher(self) -> bytes:
        lines: list[str] = []
        for nid in sorted(self._nodes):
            node = self._nodes[nid]
            props = {"id": nid, **{k: node.properties[k] for k in sorted(node.properties)}}
            body = ", ".join(f"`{k}`: {self._cypher_value(v)}" for k, v in props.items())
            lines.append(f"MERGE (n:`{node.class_label}` {{{body}}});")
        for key in sorted(self._edges):
            src, pred, dst = key
            props = self._edges[key].properties
            body = ", ".join(f"`{k}`: {self._cypher_value(props[k])}" for k in sorted(props))
            rel = f"[:`{pred}`" + (f" {{{body}}}" if body else "") + "]"
            lines.append(
                f"MATCH (a {{id: {self._cypher_value(src)}}}), (b {{id: {self._cypher_value(dst)}}}) "
                f"MERGE (a)-{rel}->(b);"
            )
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


_CURIE_BY_IRI = {iri: curie for curie, iri in VOCABULARY.items()}


def _accumulate(props: dict[str, PropertyValue], key: str, value: Scalar, is_list: bool) -> None:
    current = props.get(key)
    if is_list:
        if current is None:
            props[key] = [value]
        elif isinstance(current, list):
            current.append(value)
        else:
            props[key] = [current, value]
    else:
        props[key] = value


def _split_nquad(line: str, lineno: int) -> list[str]:
    """Tokenize one nquads line into IRI/literal terms (trailing dot dropped)."""
    if not line.endswith("."):
        raise GraphError(f"line {lineno}: missing terminating dot")
    body = line[:-1].rstrip()
    terms: list[str] = []
    i = 0
    n = len(body)
    while i < n:
        ch = body[i]
        if ch in " \t":
            i += 1
            continue
        if ch == "<":
            j = body.find(">", i)
            if j < 0:
                raise GraphError(f"line {lineno}: unterminated IRI")
            terms.append(body[i : j + 1])
            i = j + 1
        elif ch == '"':
            j = i + 1
            while j < n:
                if body[j] == "\\":
                    j += 2
                    continue
                if body[j] == '"':
                    break
                j += 1
            if j >= n:
                raise GraphError(f"line {lineno}: unterminated literal")
            j += 1
            if body[j : j + 3] == "^^<":
                k = body.find(">", j + 3)
                if k < 0:
                    raise GraphError(f"line {lineno}: unterminated datatype IRI")
                j = k + 1
            terms.append(body[i:j])
            i = j
        else:
            raise GraphError(f"line {lineno}: unexpected character {ch!r}")
    return terms
