"""Entity resolution: fuzzy actor matching and incident deduplication.

Actors are matched with a token-level edit distance that is cheap,
symmetric, and tolerant of prefix abbreviations.  Incidents are matched
with a hashed bag-of-words embedding over a small linear-scan vector
index.  Final same-as / part-of calls are delegated to the inference
backend; this module only shortlists candidates and applies the
decision to the graph.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

from . import inference
from .config import DistanceParams
from .graph_store import Edge, GraphStore
from .inference import Backend, BackendError, BackendRequest, Candidate, InferenceTask
from .ontology import ActorRecord, Incident, to_triples

logger = logging.getLogger(__name__)

DEFAULT_DIMS = 256
NEEDS_REVIEW = "sigmus:needsReview"

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def _char_levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _substitution_cost(a: str, b: str, params: DistanceParams) -> float:
    if a == b:
        return 0.0
    if min(len(a), len(b)) >= params.min_prefix_len and (
        a.startswith(b) or b.startswith(a)
    ):
        return params.prefix_substitution_cost
    return _char_levenshtein(a, b) / max(len(a), len(b))


def name_distance(a: str, b: str, params: DistanceParams | None = None) -> float:
    """Token-level edit distance in [0, 1].

    Tokens are lowercased alphanumeric runs.  Aligning two tokens costs
    their normalized character edit distance, discounted to a flat
    prefix cost when one is a prefix of the other; inserting or
    deleting a whole token has a fixed cost.  The DP total is divided
    by the longer token count, so the result is comparable across name
    lengths and symmetric in its arguments.
    """
    params = params or DistanceParams()
    ta, tb = tokenize(a), tokenize(b)
    if not ta and not tb:
        return 0.0
    if not ta or not tb:
        return 1.0
    gap = params.insert_delete_cost
    n = len(tb)
    prev = [j * gap for j in range(n + 1)]
    for i in range(1, len(ta) + 1):
        cur = [i * gap]
        for j in range(1, n + 1):
            sub = _substitution_cost(ta[i - 1], tb[j - 1], params)
            cur.append(min(prev[j] + gap, cur[j - 1] + gap, prev[j - 1] + sub))
        prev = cur
    return prev[n] / max(len(ta), len(tb))


# ---------------------------------------------------------------------------
# Hashed bag-of-words embedding

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def embed(text: str, dims: int = DEFAULT_DIMS) -> list[float]:
    """L2-normalized hashed token counts; empty text gives the zero vector."""
    vec = [0.0] * dims
    tokens = tokenize(text)
    if not tokens:
        return vec
    for token in tokens:
        vec[_fnv1a(token.encode("utf-8")) % dims] += 1.0
    norm = math.sqrt(sum(v * v for v in vec))
    return [v / norm for v in vec]


def cosine(a: list[float], b: list[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


class VectorIndex:
    """Flat in-memory index with optional JSONL persistence.

    Each line on disk is ``{"id", "vector", "text"}``; re-adding an id
    overwrites (last line wins on load).  Top-k is a linear scan, ties
    broken by id so results are stable.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None, dims: int = DEFAULT_DIMS):
        self.path = Path(path) if path is not None else None
        self.dims = dims
        self._entries: dict[str, tuple[list[float], str]] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    entry_id = doc["id"]
                    vector = [float(v) for v in doc["vector"]]
                    text = str(doc.get("text", ""))
                except (ValueError, KeyError, TypeError):
                    logger.warning("skipping unreadable index line %d in %s", lineno, self.path)
                    continue
                if len(vector) != self.dims:
                    logger.warning("skipping index line %d: wrong dims", lineno)
                    continue
                self._entries[entry_id] = (vector, text)

    def add(self, entry_id: str, text: str) -> None:
        vector = embed(text, self.dims)
        self._entries[entry_id] = (vector, text)
        if self.path is not None:
            record = {"id": entry_id, "vector": vector, "text": text}
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def text_of(self, entry_id: str) -> str:
        return self._entries[entry_id][1]

    def topk(self, query: list[float], k: int) -> list[tuple[str, float]]:
        scored = [
            (entry_id, cosine(query, vector))
            for entry_id, (vector, _) in self._entries.items()
        ]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored[:k]


# ---------------------------------------------------------------------------
# Candidate shortlists

def _actor_names(node_properties: dict) -> list[str]:
    names: list[str] = []
    label = node_properties.get("rdfs:label")
    for value in label if isinstance(label, list) else [label]:
        if isinstance(value, str):
            names.append(value)
    alts = node_properties.get("sigmus:altName")
    for value in alts if isinstance(alts, list) else ([alts] if alts else []):
        if isinstance(value, str):
            names.append(value)
    return names


def topk_actors(
    store: GraphStore,
    name: str,
    k: int,
    params: DistanceParams | None = None,
) -> list[tuple[str, float]]:
    """Closest existing actors by name distance, ties broken by id."""
    scored = []
    for node in store.nodes_by_class("Actor"):
        names = _actor_names(node.properties)
        if not names:
            continue
        best = min(name_distance(name, known, params) for known in names)
        scored.append((node.id, best))
    scored.sort(key=lambda item: (item[1], item[0]))
    return scored[:k]


def topk_incidents(index: VectorIndex, text: str, k: int) -> list[tuple[str, float]]:
    return index.topk(embed(text, index.dims), k)


_SUMMARY_CHARS = 300


def _clip(text: str) -> str:
    text = " ".join(text.split())
    return text if len(text) <= _SUMMARY_CHARS else text[: _SUMMARY_CHARS - 1] + "…"


# ---------------------------------------------------------------------------
# Resolution

@dataclass
class Resolution:
    entity_id: str
    merged: bool = False
    part_of: str | None = None
    flagged: bool = False


def _flag(store: GraphStore, node_id: str, reason: str) -> None:
    node = store.get_node(node_id)
    if node is None:
        return
    node.properties[NEEDS_REVIEW] = reason
    store.upsert_node(node)


def resolve_actor(
    store: GraphStore,
    backend: Backend,
    actor: ActorRecord,
    top_k: int = 5,
    params: DistanceParams | None = None,
    retries: int = inference.DEFAULT_RETRIES,
    backoff: float = 0.25,
) -> Resolution:
    """Insert an actor, letting the backend fold it into a near-duplicate.

    The shortlist is computed before insertion so the new record never
    competes with itself.  A same-as verdict merges the new node into
    the existing one (its name survives as an alternate); a backend
    failure keeps both and marks the new node for review.
    """
    shortlist = [
        (actor_id, dist)
        for actor_id, dist in topk_actors(store, actor.name, top_k, params)
        if actor_id != actor.id
    ]
    store.upsert_triples(to_triples(actor))
    if not shortlist:
        return Resolution(actor.id)

    candidates = []
    for actor_id, dist in shortlist:
        node = store.get_node(actor_id)
        if node is None:
            continue
        names = _actor_names(node.properties)
        label = names[0] if names else actor_id
        summary = f"also known as: {', '.join(names[1:])}" if len(names) > 1 else ""
        candidates.append(Candidate(actor_id, label, summary))
    request = BackendRequest(
        InferenceTask.ACTOR_MERGE,
        {"name": actor.name, "alt_names": list(actor.alt_names), "candidates": candidates},
    )
    try:
        decision = inference.run(backend, request, retries=retries, backoff=backoff)
    except BackendError as exc:
        logger.warning("actor merge undecided for %s: %s", actor.name, exc)
        _flag(store, actor.id, f"actor merge undecided: {exc.detail}")
        return Resolution(actor.id, flagged=True)
    if decision.same_as is not None and decision.same_as != actor.id:
        store.merge_nodes(decision.same_as, actor.id, alt_label_property="sigmus:altName")
        return Resolution(decision.same_as, merged=True)
    return Resolution(actor.id)


def resolve_incident(
    store: GraphStore,
    index: VectorIndex,
    backend: Backend,
    incident: Incident,
    source_text: str,
    top_k: int = 5,
    retries: int = inference.DEFAULT_RETRIES,
    backoff: float = 0.25,
) -> Resolution:
    """Insert or merge a candidate incident.

    Same-as folds the new incident into the survivor and leaves the
    index untouched; part-of keeps the new incident and adds an
    isPartOf edge unless that would close a cycle, in which case the
    edge is rejected and the incident flagged instead.
    """
    description = incident.description or ""
    index_text = " ".join(part for part in (incident.label, description, source_text) if part)
    shortlist = [
        (incident_id, score)
        for incident_id, score in topk_incidents(index, index_text, top_k)
        if incident_id != incident.id
    ]
    store.upsert_triples(to_triples(incident))
    if not shortlist:
        index.add(incident.id, index_text)
        return Resolution(incident.id)

    candidates = []
    for incident_id, score in shortlist:
        node = store.get_node(incident_id)
        if node is None:
            continue
        label = node.properties.get("rdfs:label")
        if isinstance(label, list):
            label = label[0] if label else incident_id
        candidates.append(
            Candidate(incident_id, str(label or incident_id), _clip(index.text_of(incident_id)))
        )
    request = BackendRequest(
        InferenceTask.INCIDENT_MERGE,
        {
            "label": incident.label,
            "description": description,
            "source_text": _clip(source_text),
            "candidates": candidates,
        },
    )
    try:
        decision = inference.run(backend, request, retries=retries, backoff=backoff)
    except BackendError as exc:
        logger.warning("incident merge undecided for %s: %s", incident.label, exc)
        _flag(store, incident.id, f"incident merge undecided: {exc.detail}")
        index.add(incident.id, index_text)
        return Resolution(incident.id, flagged=True)

    if decision.same_as is not None and decision.same_as != incident.id:
        store.merge_nodes(decision.same_as, incident.id)
        return Resolution(decision.same_as, merged=True)

    index.add(incident.id, index_text)
    if decision.part_of is not None and decision.part_of != incident.id:
        if store.would_cycle(incident.id, decision.part_of, "sigmus:isPartOf"):
            logger.warning(
                "rejecting part-of %s -> %s: would create a cycle",
                incident.id, decision.part_of,
            )
            _flag(store, incident.id, f"part-of {decision.part_of} rejected: cycle")
            return Resolution(incident.id, flagged=True)
        store.upsert_edge(Edge(
            incident.id, "sigmus:isPartOf", decision.part_of,
            {"sigmus:rationale": decision.rationale} if decision.rationale else {},
        ))
        return Resolution(incident.id, part_of=decision.part_of)
    return Resolution(incident.id)
