from __future__ import annotations

import json
import math
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FNV1A_VECTORS, oracle_cosine, oracle_fnv1a, oracle_name_distance
from urbankg.config import DistanceParams
from urbankg.disambiguation import (
    NEEDS_REVIEW,
    VectorIndex,
    cosine,
    embed,
    name_distance,
    resolve_actor,
    resolve_incident,
    tokenize,
    topk_actors,
    topk_incidents,
)
from urbankg.graph_store import Edge, GraphStore, Node
from urbankg.inference import (
    BackendUnreachable,
    Candidate,
    InferenceTask,
    StubBackend,
    stub_rules_load,
)
from urbankg.ontology import ActorRecord, Incident, TimeInterval

UTC = timezone.utc
T0 = datetime(2025, 1, 7, 19, 0, tzinfo=UTC)

NAME_CHARS = st.text(
    alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), whitelist_characters=" -'."),
    max_size=24,
)


class TestTokenize:
    def test_lowercase_alnum_runs(self):
        assert tokenize("2025 Pacific-Palisades FIRE!") == ["2025", "pacific", "palisades", "fire"]
        assert tokenize("  ") == []


class TestNameDistance:
    def test_worked_examples(self):
        assert name_distance("Palisades Fire", "palisades fire") == 0.0
        assert name_distance("Palisades Fire", "2025 Pacific Palisades Fire") == pytest.approx(0.2)
        assert name_distance("LAFD", "LAPD") == pytest.approx(0.25)

    def test_empty_cases(self):
        assert name_distance("", "") == 0.0
        assert name_distance("", "fire") == 1.0
        assert name_distance("fire", "!!!") == 1.0  # tokens vanish

    def test_prefix_discount_needs_three_chars(self):
        # "pa" prefixes "palisades" but is below the length floor
        discounted = name_distance("pali", "palisades")
        undiscounted = name_distance("pa", "palisades")
        assert discounted == pytest.approx(0.2)
        assert undiscounted > discounted

    def test_params_respected(self):
        params = DistanceParams(prefix_substitution_cost=0.0, insert_delete_cost=1.0)
        assert name_distance("pali fire", "palisades fire", params) == 0.0
        assert name_distance("fire", "fire extra", params) == pytest.approx(0.5)

    @settings(max_examples=150, deadline=None)
    @given(a=NAME_CHARS, b=NAME_CHARS)
    def test_matches_oracle(self, a, b):
        assert name_distance(a, b) == pytest.approx(oracle_name_distance(a, b), abs=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(a=NAME_CHARS, b=NAME_CHARS)
    def test_symmetric_bounded_identity(self, a, b):
        d = name_distance(a, b)
        assert d == name_distance(b, a)
        assert 0.0 <= d <= 1.0
        assert name_distance(a, a) == 0.0


class TestEmbedding:
    def test_fnv_reference_vectors(self):
        for data, expected in FNV1A_VECTORS.items():
            assert oracle_fnv1a(data) == expected

    def test_token_lands_in_fnv_bucket(self):
        vec = embed("a", dims=256)
        assert vec[FNV1A_VECTORS[b"a"] % 256] == 1.0
        assert sum(v != 0.0 for v in vec) == 1

    def test_counts_then_l2_normalized(self):
        vec = embed("fire fire water", dims=64)
        norm = math.sqrt(sum(v * v for v in vec))
        assert norm == pytest.approx(1.0)
        hi = vec[oracle_fnv1a(b"fire") % 64]
        lo = vec[oracle_fnv1a(b"water") % 64]
        assert hi == pytest.approx(2 / math.sqrt(5))
        assert lo == pytest.approx(1 / math.sqrt(5))

    def test_empty_text_zero_vector(self):
        assert embed("", dims=16) == [0.0] * 16
        assert cosine(embed("", 16), embed("fire", 16)) == 0.0

    def test_case_insensitive(self):
        assert embed("Palisades FIRE") == embed("palisades fire")

    @settings(max_examples=80, deadline=None)
    @given(a=NAME_CHARS, b=NAME_CHARS)
    def test_cosine_matches_oracle(self, a, b):
        va, vb = embed(a, 64), embed(b, 64)
        assert cosine(va, vb) == pytest.approx(oracle_cosine(va, vb), abs=1e-12)


class TestVectorIndex:
    def test_persistence_last_wins(self, tmp_path):
        path = tmp_path / "idx.jsonl"
        idx = VectorIndex(path, dims=32)
        idx.add("i:1", "palisades fire")
        idx.add("i:2", "harbor oil spill")
        idx.add("i:1", "palisades brush fire")  # overwrite
        idx2 = VectorIndex(path, dims=32)
        assert len(idx2) == 2
        assert idx2.text_of("i:1") == "palisades brush fire"
        assert "i:2" in idx2

    def test_corrupt_and_wrong_dims_lines_skipped(self, tmp_path):
        path = tmp_path / "idx.jsonl"
        idx = VectorIndex(path, dims=8)
        idx.add("good", "fire")
        with open(path, "a") as fh:
            fh.write("{broken\n")
            fh.write(json.dumps({"id": "short", "vector": [1.0], "text": "x"}) + "\n")
        idx2 = VectorIndex(path, dims=8)
        assert len(idx2) == 1 and "good" in idx2

    def test_topk_ties_by_id(self):
        idx = VectorIndex(dims=32)
        idx.add("b", "fire")
        idx.add("a", "fire")
        idx.add("c", "water")
        hits = idx.topk(embed("fire", 32), 3)
        assert [h[0] for h in hits[:2]] == ["a", "b"]
        assert hits[0][1] == pytest.approx(1.0)

    def test_topk_incidents_helper(self):
        idx = VectorIndex(dims=32)
        idx.add("i:fire", "palisades fire smoke evacuation")
        idx.add("i:spill", "harbor oil spill cleanup")
        hits = topk_incidents(idx, "smoke from the palisades fire", 1)
        assert hits[0][0] == "i:fire"


def _actor_node(store, actor_id, label, alts=()):
    props = {"rdfs:label": label}
    if alts:
        props["sigmus:altName"] = list(alts)
    store.upsert_node(Node(actor_id, "Actor", props))


class TestTopkActors:
    def test_ranks_and_ties(self, store):
        _actor_node(store, "actor:b", "LAPD")
        _actor_node(store, "actor:a", "LAPD")
        _actor_node(store, "actor:z", "Sanitation Bureau")
        hits = topk_actors(store, "LAPD", 2)
        assert hits == [("actor:a", 0.0), ("actor:b", 0.0)]

    def test_alt_names_count(self, store):
        _actor_node(store, "actor:1", "Los Angeles Fire Department", alts=["LAFD"])
        hits = topk_actors(store, "LAFD", 1)
        assert hits[0] == ("actor:1", 0.0)


def _merge_backend(tmp_path, rules_text):
    path = tmp_path / "rules.tsv"
    path.write_text(rules_text)
    return StubBackend(stub_rules_load(path))


class _AlwaysBackend:
    """Returns a fixed merge verdict pointing at the first candidate."""

    def __init__(self, field):
        self.field = field

    def complete(self, request, prompt):
        first = request.candidates()[0].id
        doc = {"same_as": None, "part_of": None, "rationale": "scripted"}
        doc[self.field] = first
        return "```json\n" + json.dumps(doc) + "\n```"


class _DownBackend:
    def complete(self, request, prompt):
        raise BackendUnreachable(request.task.value, "offline")


class TestResolveActor:
    def test_first_actor_inserts_clean(self, store, tmp_path):
        backend = _merge_backend(tmp_path, "nevermatch\tasame:x\n")
        rec = ActorRecord("actor:new", "Los Angeles Fire Department")
        res = resolve_actor(store, backend, rec)
        assert res.entity_id == "actor:new" and not res.merged and not res.flagged
        assert store.get_node("actor:new").properties["rdfs:label"] == "Los Angeles Fire Department"

    def test_near_duplicate_merges(self, store, tmp_path):
        _actor_node(store, "actor:keep", "Los Angeles Fire Department")
        backend = _merge_backend(tmp_path, "la fire dept\tasame:Los Angeles Fire Department\n")
        rec = ActorRecord("actor:new", "LA Fire Dept")
        res = resolve_actor(store, backend, rec)
        assert res.merged and res.entity_id == "actor:keep"
        assert store.get_node("actor:new") is None
        assert "LA Fire Dept" in store.get_node("actor:keep").properties["sigmus:altName"]

    def test_no_rule_keeps_both(self, store, tmp_path):
        _actor_node(store, "actor:keep", "Los Angeles Fire Department")
        backend = _merge_backend(tmp_path, "nevermatch\tasame:x\n")
        res = resolve_actor(store, backend, ActorRecord("actor:new", "LA Sanitation"))
        assert not res.merged
        assert store.get_node("actor:new") is not None

    def test_backend_failure_flags_for_review(self, store):
        _actor_node(store, "actor:keep", "Los Angeles Fire Department")
        rec = ActorRecord("actor:new", "LA Fire Dept")
        res = resolve_actor(store, _DownBackend(), rec, retries=0, backoff=0.0)
        assert res.flagged and not res.merged
        node = store.get_node("actor:new")
        assert NEEDS_REVIEW in node.properties
        assert store.get_node("actor:keep") is not None


def _incident(incident_id, label, description=""):
    return Incident(
        id=incident_id,
        label=label,
        description=description,
        interval=TimeInterval(T0, None),
        source_report_ids=["report:r0"],
    )


class TestResolveIncident:
    def test_first_incident_indexed(self, store, tmp_path):
        idx = VectorIndex(dims=64)
        backend = _merge_backend(tmp_path, "nevermatch\tsame:x\n")
        res = resolve_incident(store, idx, backend, _incident("incident:1", "Palisades Fire"),
                               "brush fire in the palisades")
        assert res.entity_id == "incident:1" and not res.merged
        assert "incident:1" in idx and len(idx) == 1

    def test_same_as_merges_and_keeps_index(self, store, tmp_path):
        idx = VectorIndex(dims=64)
        backend = _merge_backend(
            tmp_path,
            "pacific palisades wildfire\tsame:Palisades Fire\n",
        )
        resolve_incident(store, idx, backend, _incident("incident:1", "Palisades Fire"),
                         "fast moving brush fire")
        res = resolve_incident(
            store, idx, backend,
            _incident("incident:2", "2025 Pacific Palisades Wildfire"),
            "the palisades fire grew overnight",
        )
        assert res.merged and res.entity_id == "incident:1"
        assert store.get_node("incident:2") is None
        assert "incident:2" not in idx
        # absorbed label survives as an alternate
        assert "2025 Pacific Palisades Wildfire" in store.get_node("incident:1").properties["sigmus:altLabel"]

    def test_part_of_adds_edge(self, store, tmp_path):
        idx = VectorIndex(dims=64)
        backend = _merge_backend(tmp_path, "palisades fire\tpartof:Los Angeles Wildfires\n")
        resolve_incident(store, idx, backend,
                         _incident("incident:lda", "2025 Los Angeles Wildfires"),
                         "many fires burning")
        res = resolve_incident(store, idx, backend,
                               _incident("incident:pal", "Palisades Fire"),
                               "palisades fire evacuation")
        assert res.part_of == "incident:lda"
        edges = store.edges_from("incident:pal", "sigmus:isPartOf")
        assert [e.dst for e in edges] == ["incident:lda"]
        assert "incident:pal" in idx

    def test_cycle_rejected_and_flagged(self, store, tmp_path):
        idx = VectorIndex(dims=64)
        quiet = _merge_backend(tmp_path, "nevermatch\tsame:x\n")
        resolve_incident(store, idx, quiet, _incident("incident:a", "Alpha Fire"),
                         "alpha fire text")
        resolve_incident(store, idx, quiet, _incident("incident:b", "Beta Fire"),
                         "beta fire text")
        store.upsert_edge(Edge("incident:b", "sigmus:isPartOf", "incident:a"))
        # re-resolving A with a backend that insists A isPartOf B would close b->a->b
        res = resolve_incident(store, idx, _AlwaysBackend("part_of"),
                               _incident("incident:a", "Alpha Fire"), "alpha fire text")
        assert res.flagged and res.part_of is None
        assert not store.edges_from("incident:a", "sigmus:isPartOf")
        assert NEEDS_REVIEW in store.get_node("incident:a").properties
        assert not store.has_cycle("sigmus:isPartOf")

    def test_backend_failure_flags_but_indexes(self, store):
        idx = VectorIndex(dims=64)
        rules_backend = _DownBackend()
        store_first = _incident("incident:1", "Palisades Fire")
        # seed one incident so the second sees a candidate shortlist
        quiet = StubBackend([])
        resolve_incident(store, idx, quiet, store_first, "palisades fire")
        res = resolve_incident(store, idx, rules_backend,
                               _incident("incident:2", "Palisades Fire Update"),
                               "palisades fire", retries=0, backoff=0.0)
        assert res.flagged
        assert "incident:2" in idx
        assert NEEDS_REVIEW in store.get_node("incident:2").properties

    def test_self_candidate_excluded_on_repeat(self, store, tmp_path):
        idx = VectorIndex(dims=64)

        class MustNotSeeSelf:
            def complete(self, request, prompt):
                ids = [c.id for c in request.candidates()]
                assert "incident:1" not in ids, "entity offered itself as a merge target"
                return "```json\n" + json.dumps(
                    {"same_as": None, "part_of": None, "rationale": ""}) + "\n```"

        quiet = _merge_backend(tmp_path, "nevermatch\tsame:x\n")
        resolve_incident(store, idx, quiet, _incident("incident:1", "Palisades Fire"),
                         "palisades fire")
        # replay of the identical report resolves the same id again
        res = resolve_incident(store, idx, MustNotSeeSelf(),
                               _incident("incident:1", "Palisades Fire"), "palisades fire")
        assert res.entity_id == "incident:1" and not res.flagged
