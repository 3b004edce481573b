"""Entity classes stored in the knowledge graph and their triple mapping.

Every record the engine touches is normalized into one of the classes
below before it reaches the graph store.  The vocabulary table fixes the
predicate strings used by serialization and by the exporters, so graph
dumps stay stable across runs.
"""

from __future__ import annotations

import importlib.resources
import logging
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum

logger = logging.getLogger(__name__)

EntityId = str

# Predicate vocabulary, curie -> full IRI.  Exporters expand these; the
# rest of the code passes the curie strings around.
VOCABULARY: dict[str, str] = {
    "rdf:type": "http://www.w3.org/1999/02/22-rdf-syntax-ns#type",
    "rdfs:label": "http://www.w3.org/2000/01/rdf-schema#label",
    "rdfs:comment": "http://www.w3.org/2000/01/rdf-schema#comment",
    "dcterms:identifier": "http://purl.org/dc/terms/identifier",
    "time:hasBeginning": "http://www.w3.org/2006/time#hasBeginning",
    "time:hasEnd": "http://www.w3.org/2006/time#hasEnd",
    "sosa:observedProperty": "http://www.w3.org/ns/sosa/observedProperty",
    "qudt:unit": "http://qudt.org/schema/qudt/unit",
    "qudt:value": "http://qudt.org/schema/qudt/value",
    "sigmus:Incident": "urn:sigmus:Incident",
    "sigmus:Report": "urn:sigmus:Report",
    "sigmus:ModalitySegment": "urn:sigmus:ModalitySegment",
    "sigmus:Inference": "urn:sigmus:Inference",
    "sigmus:Observer": "urn:sigmus:Observer",
    "sigmus:Aggregator": "urn:sigmus:Aggregator",
    "sigmus:Actor": "urn:sigmus:Actor",
    "sigmus:Event": "urn:sigmus:Event",
    "sigmus:producedBy": "urn:sigmus:producedBy",
    "sigmus:collectedBy": "urn:sigmus:collectedBy",
    "sigmus:hasModality": "urn:sigmus:hasModality",
    "sigmus:evidenceOf": "urn:sigmus:evidenceOf",
    "sigmus:isPartOf": "urn:sigmus:isPartOf",
    "sigmus:hasInference": "urn:sigmus:hasInference",
    "sigmus:describesEvent": "urn:sigmus:describesEvent",
    "sigmus:actor1": "urn:sigmus:actor1",
    "sigmus:actor2": "urn:sigmus:actor2",
    "sigmus:inferenceType": "urn:sigmus:inferenceType",
    "sigmus:inferenceResult": "urn:sigmus:inferenceResult",
    "sigmus:cameoEvent": "urn:sigmus:cameoEvent",
    "sigmus:cameoActor": "urn:sigmus:cameoActor",
    "sigmus:capCategory": "urn:sigmus:capCategory",
    "sigmus:altLabel": "urn:sigmus:altLabel",
    "sigmus:altName": "urn:sigmus:altName",
    "sigmus:sourceReport": "urn:sigmus:sourceReport",
    "sigmus:observedAt": "urn:sigmus:observedAt",
    "sigmus:aggregator": "urn:sigmus:aggregator",
    "sigmus:modalityKind": "urn:sigmus:modalityKind",
    "sigmus:segmentIndex": "urn:sigmus:segmentIndex",
    "sigmus:annotation": "urn:sigmus:annotation",
    "sigmus:lat": "urn:sigmus:lat",
    "sigmus:lon": "urn:sigmus:lon",
    "sigmus:placeName": "urn:sigmus:placeName",
    "sigmus:needsReview": "urn:sigmus:needsReview",
    "sigmus:ingestFailed": "urn:sigmus:ingestFailed",
    "sigmus:failureReason": "urn:sigmus:failureReason",
    "sigmus:rationale": "urn:sigmus:rationale",
}

CLASSES = (
    "Incident",
    "Report",
    "ModalitySegment",
    "Inference",
    "Observer",
    "Aggregator",
    "Actor",
    "Event",
)

# Edge predicates the graph store accepts between entity nodes.
EDGE_PREDICATES = (
    "sigmus:producedBy",
    "sigmus:collectedBy",
    "sigmus:hasModality",
    "sigmus:evidenceOf",
    "sigmus:isPartOf",
    "sigmus:hasInference",
    "sigmus:describesEvent",
    "sigmus:actor1",
    "sigmus:actor2",
)

# The 12 category tokens from the Common Alerting Protocol.
CAP_CATEGORIES = frozenset(
    {
        "Geo",
        "Met",
        "Safety",
        "Security",
        "Rescue",
        "Fire",
        "Health",
        "Env",
        "Transport",
        "Infra",
        "CBRNE",
        "Other",
    }
)


class OntologyError(ValueError):
    """Entity failed validation or triples could not be interpreted."""


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    TABULAR = "tabular"


@dataclass
class GeoPoint:
    lat: float
    lon: float
    place_name: str | None = None


@dataclass
class TimeInterval:
    start: datetime
    end: datetime | None = None


@dataclass
class InferenceRecord:
    inference_type: str
    inference_result: str


@dataclass
class ModalitySegment:
    kind: Modality
    value: str
    property: str | None = None
    unit: str | None = None
    annotation: str | None = None
    inferences: list[InferenceRecord] = field(default_factory=list)


@dataclass
class Report:
    id: EntityId
    aggregator_id: EntityId
    observer_id: EntityId
    observed_at: datetime
    geo: GeoPoint | None
    segments: list[ModalitySegment] = field(default_factory=list)


@dataclass
class Incident:
    id: EntityId
    label: str
    description: str
    interval: TimeInterval
    geo: GeoPoint | None = None
    source_report_ids: list[EntityId] = field(default_factory=list)


@dataclass
class Observer:
    id: EntityId
    label: str


@dataclass
class Aggregator:
    id: EntityId
    label: str


@dataclass
class ActorRecord:
    id: EntityId
    name: str
    cameo_actor_code: str | None = None
    alt_names: list[str] = field(default_factory=list)


@dataclass
class EventRecord:
    id: EntityId
    cameo_event_code: str
    actor1: EntityId | None = None
    actor2: EntityId | None = None
    cap_category: str | None = None


Entity = (
    GeoPoint
    | TimeInterval
    | InferenceRecord
    | ModalitySegment
    | Report
    | Incident
    | Observer
    | Aggregator
    | ActorRecord
    | EventRecord
)


# ---------------------------------------------------------------------------
# CAMEO codebook

@dataclass(frozen=True)
class CameoEntry:
    code: str
    term: str
    description: str


# Root event codes, kept inline so lookups work even when the packaged
# data file is unavailable.
_EMBEDDED_CAMEO: dict[str, CameoEntry] = {
    code: CameoEntry(code, term, desc)
    for code, term, desc in [
        ("01", "MAKE PUBLIC STATEMENT", "All public statements expressed verbally or in action."),
        ("02", "APPEAL", "All requests, proposals, and suggestions."),
        ("03", "EXPRESS INTENT TO COOPERATE", "All offers and promises of cooperation."),
        ("04", "CONSULT", "All consultations and meetings."),
        ("05", "ENGAGE IN DIPLOMATIC COOPERATION", "All cooperative actions in the diplomatic arena."),
        ("06", "ENGAGE IN MATERIAL COOPERATION", "All cooperative actions involving material exchange."),
        ("07", "PROVIDE AID", "All provisions of material or institutional aid."),
        ("08", "YIELD", "All yieldings, concessions, and de-escalations."),
        ("09", "INVESTIGATE", "All investigative actions."),
        ("10", "DEMAND", "All demands issued toward another party."),
        ("11", "DISAPPROVE", "All expressions of disapproval, objection, and complaint."),
        ("12", "REJECT", "All rejections and refusals."),
        ("13", "THREATEN", "All threats, coercive warnings, and ultimatums."),
        ("14", "PROTEST", "All civilian demonstrations and other collective actions of dissent."),
        ("15", "EXHIBIT FORCE POSTURE", "All military and police demonstrations of capability."),
        ("16", "REDUCE RELATIONS", "All reductions in normal relations."),
        ("17", "COERCE", "All coercive and repressive actions."),
        ("18", "ASSAULT", "All uses of unconventional force without clear military engagement."),
        ("19", "FIGHT", "All uses of conventional force."),
        ("20", "USE UNCONVENTIONAL MASS VIOLENCE", "All uses of massive unconventional force."),
    ]
}

_default_cameo_table: dict[str, CameoEntry] | None = None


def load_cameo_table(path: str | None = None) -> dict[str, CameoEntry]:
    """Load a code -> entry table from a tab separated codebook file.

    Lines look like ``code<TAB>term<TAB>description``.  Blank lines and
    lines starting with ``#`` are ignored.  The embedded root codes are
    always present; file entries extend or override them.
    """
    table = dict(_EMBEDDED_CAMEO)
    try:
        if path is None:
            ref = importlib.resources.files("urbankg").joinpath("data/cameo_codes.tsv")
            text = ref.read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    except OSError as exc:
        logger.warning("cameo codebook not readable (%s), using embedded subset", exc)
        return table
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            logger.warning("cameo codebook line %d malformed, skipping", lineno)
            continue
        code = parts[0].strip()
        term = parts[1].strip()
        desc = parts[2].strip() if len(parts) > 2 else ""
        if code:
            table[code] = CameoEntry(code, term, desc)
    return table


def cameo_lookup(code: str, table: dict[str, CameoEntry] | None = None) -> CameoEntry | None:
    """Resolve a CAMEO code to its entry, or None when unknown."""
    global _default_cameo_table
    if table is None:
        if _default_cameo_table is None:
            _default_cameo_table = load_cameo_table()
        table = _default_cameo_table
    if not code:
        return None
    return table.get(code)


# ---------------------------------------------------------------------------
# Validation

def _check_geo(geo: GeoPoint, out: list[str]) -> None:
    if not isinstance(geo.lat, (int, float)) or not (-90.0 <= geo.lat <= 90.0):
        out.append("lat out of range")
    if not isinstance(geo.lon, (int, float)) or not (-180.0 <= geo.lon <= 180.0):
        out.append("lon out of range")


def _check_ts(value: datetime | None, name: str, out: list[str], required: bool = True) -> None:
    if value is None:
        if required:
            out.append(f"{name} missing")
        return
    if value.tzinfo is None:
        out.append(f"{name} must be timezone aware")


def validate(entity: Entity) -> list[str]:
    """Return a list of invariant violations, empty when the entity is valid."""
    out: list[str] = []
    if isinstance(entity, GeoPoint):
        _check_geo(entity, out)
    elif isinstance(entity, TimeInterval):
        _check_ts(entity.start, "start", out)
        _check_ts(entity.end, "end", out, required=False)
        if entity.end is not None and entity.start is not None and entity.end < entity.start:
            out.append("end before start")
    elif isinstance(entity, InferenceRecord):
        if not entity.inference_type.strip():
            out.append("inferenceType empty")
        if not entity.inference_result.strip():
            out.append("inferenceResult empty")
    elif isinstance(entity, ModalitySegment):
        if not isinstance(entity.kind, Modality):
            out.append("kind not a modality")
        elif entity.kind is Modality.TABULAR:
            if not (entity.property or "").strip():
                out.append("tabular segment requires property")
            if not (entity.unit or "").strip():
                out.append("tabular segment requires unit")
        elif entity.kind is Modality.IMAGE:
            if not entity.value.strip():
                out.append("image segment requires a blob reference path")
        for inf in entity.inferences:
            out.extend(validate(inf))
    elif isinstance(entity, Report):
        if not entity.id:
            out.append("id empty")
        if not entity.aggregator_id:
            out.append("aggregatorId empty")
        if not entity.observer_id:
            out.append("observerId empty")
        _check_ts(entity.observed_at, "observedAt", out)
        if not entity.segments:
            out.append("segments non-empty")
        if entity.geo is not None:
            _check_geo(entity.geo, out)
        for seg in entity.segments:
            out.extend(validate(seg))
    elif isinstance(entity, Incident):
        if not entity.id:
            out.append("id empty")
        if not entity.label.strip():
            out.append("label empty")
        if not entity.source_report_ids:
            out.append("at least one source report id required")
        out.extend(validate(entity.interval))
        if entity.geo is not None:
            _check_geo(entity.geo, out)
    elif isinstance(entity, (Observer, Aggregator)):
        if not entity.id:
            out.append("id empty")
        if not entity.label.strip():
            out.append("label empty")
    elif isinstance(entity, ActorRecord):
        if not entity.id:
            out.append("id empty")
        if not entity.name.strip():
            out.append("name empty")
        if entity.name in entity.alt_names:
            out.append("altNames must not repeat name")
    elif isinstance(entity, EventRecord):
        if not entity.id:
            out.append("id empty")
        if cameo_lookup(entity.cameo_event_code) is None:
            out.append(f"unknown cameo event code {entity.cameo_event_code!r}")
        if entity.cap_category is not None and entity.cap_category not in CAP_CATEGORIES:
            out.append(f"capCategory {entity.cap_category!r} not a CAP token")
    else:
        out.append(f"unsupported entity type {type(entity).__name__}")
    return out


# ---------------------------------------------------------------------------
# Triple mapping

Scalar = str | int | float | bool


@dataclass(frozen=True)
class Ref:
    """Object position reference to another node."""

    id: EntityId


@dataclass(frozen=True)
class Triple:
    subject: EntityId
    predicate: str
    obj: Scalar | Ref


def _ts(value: datetime) -> str:
    return value.isoformat()


def _geo_triples(subject: EntityId, geo: GeoPoint | None) -> list[Triple]:
    if geo is None:
        return []
    out = [
        Triple(subject, "sigmus:lat", float(geo.lat)),
        Triple(subject, "sigmus:lon", float(geo.lon)),
    ]
    if geo.place_name is not None:
        out.append(Triple(subject, "sigmus:placeName", geo.place_name))
    return out


def to_triples(entity: Entity) -> list[Triple]:
    """Serialize an entity (and any nested segments/inferences) to triples.

    Raises OntologyError when the entity fails validation.  Output order
    is deterministic: the root's type triple comes first.
    """
    problems = validate(entity)
    if problems:
        raise OntologyError(f"{type(entity).__name__} invalid: {'; '.join(problems)}")

    t: list[Triple] = []
    if isinstance(entity, Observer):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Observer"))
        t.append(Triple(entity.id, "rdfs:label", entity.label))
    elif isinstance(entity, Aggregator):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Aggregator"))
        t.append(Triple(entity.id, "rdfs:label", entity.label))
    elif isinstance(entity, ActorRecord):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Actor"))
        t.append(Triple(entity.id, "rdfs:label", entity.name))
        if entity.cameo_actor_code is not None:
            t.append(Triple(entity.id, "sigmus:cameoActor", entity.cameo_actor_code))
        for alt in entity.alt_names:
            t.append(Triple(entity.id, "sigmus:altName", alt))
    elif isinstance(entity, EventRecord):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Event"))
        t.append(Triple(entity.id, "sigmus:cameoEvent", entity.cameo_event_code))
        if entity.actor1 is not None:
            t.append(Triple(entity.id, "sigmus:actor1", Ref(entity.actor1)))
        if entity.actor2 is not None:
            t.append(Triple(entity.id, "sigmus:actor2", Ref(entity.actor2)))
        if entity.cap_category is not None:
            t.append(Triple(entity.id, "sigmus:capCategory", entity.cap_category))
    elif isinstance(entity, Incident):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Incident"))
        t.append(Triple(entity.id, "rdfs:label", entity.label))
        t.append(Triple(entity.id, "rdfs:comment", entity.description))
        t.append(Triple(entity.id, "time:hasBeginning", _ts(entity.interval.start)))
        if entity.interval.end is not None:
            t.append(Triple(entity.id, "time:hasEnd", _ts(entity.interval.end)))
        t.extend(_geo_triples(entity.id, entity.geo))
        for rid in entity.source_report_ids:
            t.append(Triple(entity.id, "sigmus:sourceReport", rid))
    elif isinstance(entity, Report):
        t.append(Triple(entity.id, "rdf:type", "sigmus:Report"))
        t.append(Triple(entity.id, "sigmus:observedAt", _ts(entity.observed_at)))
        t.append(Triple(entity.id, "sigmus:aggregator", entity.aggregator_id))
        t.append(Triple(entity.id, "sigmus:producedBy", Ref(entity.observer_id)))
        t.extend(_geo_triples(entity.id, entity.geo))
        for i, seg in enumerate(entity.segments):
            seg_id = f"{entity.id}#seg{i}"
            t.append(Triple(entity.id, "sigmus:hasModality", Ref(seg_id)))
            t.append(Triple(seg_id, "rdf:type", "sigmus:ModalitySegment"))
            t.append(Triple(seg_id, "sigmus:segmentIndex", i))
            t.append(Triple(seg_id, "sigmus:modalityKind", seg.kind.value))
            t.append(Triple(seg_id, "qudt:value", seg.value))
            if seg.property is not None:
                t.append(Triple(seg_id, "sosa:observedProperty", seg.property))
            if seg.unit is not None:
                t.append(Triple(seg_id, "qudt:unit", seg.unit))
            if seg.annotation is not None:
                t.append(Triple(seg_id, "sigmus:annotation", seg.annotation))
            for j, inf in enumerate(seg.inferences):
                inf_id = f"{seg_id}/inf{j}"
                t.append(Triple(seg_id, "sigmus:hasInference", Ref(inf_id)))
                t.append(Triple(inf_id, "rdf:type", "sigmus:Inference"))
                t.append(Triple(inf_id, "sigmus:inferenceType", inf.inference_type))
                t.append(Triple(inf_id, "sigmus:inferenceResult", inf.inference_result))
    else:
        raise OntologyError(f"no triple mapping for {type(entity).__name__}")
    return t


def _group(triples: list[Triple]) -> dict[EntityId, list[Triple]]:
    by_subject: dict[EntityId, list[Triple]] = {}
    for tr in triples:
        by_subject.setdefault(tr.subject, []).append(tr)
    return by_subject


def _literals(rows: list[Triple], predicate: str) -> list[Scalar]:
    return [r.obj for r in rows if r.predicate == predicate and not isinstance(r.obj, Ref)]


def _one(rows: list[Triple], predicate: str, subject: EntityId) -> Scalar:
    vals = _literals(rows, predicate)
    if len(vals) != 1:
        raise OntologyError(f"expected exactly one {predicate} on {subject}, got {len(vals)}")
    return vals[0]


def _maybe(rows: list[Triple], predicate: str) -> Scalar | None:
    vals = _literals(rows, predicate)
    return vals[0] if vals else None


def _refs(rows: list[Triple], predicate: str) -> list[EntityId]:
    return [r.obj.id for r in rows if r.predicate == predicate and isinstance(r.obj, Ref)]


def _geo_from(rows: list[Triple]) -> GeoPoint | None:
    lat = _maybe(rows, "sigmus:lat")
    lon = _maybe(rows, "sigmus:lon")
    if lat is None or lon is None:
        return None
    place = _maybe(rows, "sigmus:placeName")
    return GeoPoint(float(lat), float(lon), str(place) if place is not None else None)


def from_triples(triples: list[Triple]) -> Entity:
    """Reconstruct the entity a to_triples call produced.

    The triple list must describe exactly one root entity; segment and
    inference subjects hanging off a report are folded back in.
    """
    if not triples:
        raise OntologyError("empty triple list")
    by_subject = _group(triples)
    roots = [
        (s, rows)
        for s, rows in by_subject.items()
        if any(
            r.predicate == "rdf:type"
            and r.obj in ("sigmus:Incident", "sigmus:Report", "sigmus:Observer",
                          "sigmus:Aggregator", "sigmus:Actor", "sigmus:Event")
            for r in rows
        )
    ]
    if len(roots) != 1:
        raise OntologyError(f"expected one root entity, found {len(roots)}")
    subject, rows = roots[0]
    kind = _one(rows, "rdf:type", subject)

    if kind == "sigmus:Observer":
        return Observer(subject, str(_one(rows, "rdfs:label", subject)))
    if kind == "sigmus:Aggregator":
        return Aggregator(subject, str(_one(rows, "rdfs:label", subject)))
    if kind == "sigmus:Actor":
        code = _maybe(rows, "sigmus:cameoActor")
        return ActorRecord(
            subject,
            str(_one(rows, "rdfs:label", subject)),
            cameo_actor_code=str(code) if code is not None else None,
            alt_names=[str(v) for v in _literals(rows, "sigmus:altName")],
        )
    if kind == "sigmus:Event":
        actor1 = _refs(rows, "sigmus:actor1")
        actor2 = _refs(rows, "sigmus:actor2")
        cap = _maybe(rows, "sigmus:capCategory")
        return EventRecord(
            subject,
            str(_one(rows, "sigmus:cameoEvent", subject)),
            actor1=actor1[0] if actor1 else None,
            actor2=actor2[0] if actor2 else None,
            cap_category=str(cap) if cap is not None else None,
        )
    if kind == "sigmus:Incident":
        end = _maybe(rows, "time:hasEnd")
        return Incident(
            subject,
            str(_one(rows, "rdfs:label", subject)),
            str(_one(rows, "rdfs:comment", subject)),
            TimeInterval(
                datetime.fromisoformat(str(_one(rows, "time:hasBeginning", subject))),
                datetime.fromisoformat(str(end)) if end is not None else None,
            ),
            geo=_geo_from(rows),
            source_report_ids=[str(v) for v in _literals(rows, "sigmus:sourceReport")],
        )
    if kind == "sigmus:Report":
        segments: list[ModalitySegment] = []
        seg_ids = _refs(rows, "sigmus:hasModality")
        ordered = sorted(
            seg_ids,
            key=lambda sid: int(_one(by_subject.get(sid, []), "sigmus:segmentIndex", sid)),
        )
        for sid in ordered:
            seg_rows = by_subject.get(sid, [])
            inferences = []
            for iid in _refs(seg_rows, "sigmus:hasInference"):
                inf_rows = by_subject.get(iid, [])
                inferences.append(
                    InferenceRecord(
                        str(_one(inf_rows, "sigmus:inferenceType", iid)),
                        str(_one(inf_rows, "sigmus:inferenceResult", iid)),
                    )
                )
            prop = _maybe(seg_rows, "sosa:observedProperty")
            unit = _maybe(seg_rows, "qudt:unit")
            note = _maybe(seg_rows, "sigmus:annotation")
            segments.append(
                ModalitySegment(
                    Modality(str(_one(seg_rows, "sigmus:modalityKind", sid))),
                    str(_one(seg_rows, "qudt:value", sid)),
                    property=str(prop) if prop is not None else None,
                    unit=str(unit) if unit is not None else None,
                    annotation=str(note) if note is not None else None,
                    inferences=inferences,
                )
            )
        return Report(
            subject,
            str(_one(rows, "sigmus:aggregator", subject)),
            _refs(rows, "sigmus:producedBy")[0],
            datetime.fromisoformat(str(_one(rows, "sigmus:observedAt", subject))),
            _geo_from(rows),
            segments,
        )
    raise OntologyError(f"unknown root type {kind!r}")
