"""Backend-agnostic inference layer.

Every enrichment step (actor/event parsing, captioning, linking, merge
adjudication) is phrased as a BackendRequest.  A backend only has to
turn a rendered prompt into text containing one fenced JSON object;
``run`` owns prompt rendering, response parsing, invariant checks, and
retries, so the rule-driven stub and a live HTTP model are
interchangeable.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol

import importlib.resources

import requests

from .ontology import CAP_CATEGORIES

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "URBANKG_ENDPOINT"
ENV_MODEL = "URBANKG_MODEL"
ENV_API_KEY = "URBANKG_API_KEY"

DEFAULT_RETRIES = 2
DEFAULT_CAPTION = "No notable activity."


class InferenceTask(str, Enum):
    ACTOR_EVENT_PARSE = "actorEventParse"
    IMAGE_CAPTION = "imageCaption"
    CROSS_MODAL_LINK = "crossModalLink"
    INCIDENT_MERGE = "incidentMerge"
    ACTOR_MERGE = "actorMerge"


_TEMPLATE_FILES = {
    InferenceTask.ACTOR_EVENT_PARSE: "actor_event_parse.txt",
    InferenceTask.IMAGE_CAPTION: "image_caption.txt",
    InferenceTask.CROSS_MODAL_LINK: "cross_modal_link.txt",
    InferenceTask.INCIDENT_MERGE: "incident_merge.txt",
    InferenceTask.ACTOR_MERGE: "actor_merge.txt",
}

_REQUIRED_CONTEXT = {
    InferenceTask.ACTOR_EVENT_PARSE: ("text",),
    InferenceTask.IMAGE_CAPTION: ("image_path", "annotation"),
    InferenceTask.CROSS_MODAL_LINK: ("report_summary", "candidates"),
    InferenceTask.INCIDENT_MERGE: ("label", "description", "source_text", "candidates"),
    InferenceTask.ACTOR_MERGE: ("name", "alt_names", "candidates"),
}

_CANDIDATE_TASKS = (
    InferenceTask.CROSS_MODAL_LINK,
    InferenceTask.INCIDENT_MERGE,
    InferenceTask.ACTOR_MERGE,
)


class BackendError(Exception):
    """Structured inference failure after retries are exhausted."""

    def __init__(self, task: str, detail: str, attempts: int = 1):
        super().__init__(f"{task}: {detail} (after {attempts} attempt(s))")
        self.task = task
        self.detail = detail
        self.attempts = attempts


class BackendUnreachable(BackendError):
    pass


class MalformedOutput(BackendError):
    pass


class CandidateViolation(BackendError):
    pass


@dataclass
class Candidate:
    id: str
    label: str
    summary: str = ""


@dataclass
class BackendRequest:
    task: InferenceTask
    prompt_context: dict[str, Any]
    max_candidates: int = 50

    def candidates(self) -> list[Candidate]:
        return list(self.prompt_context.get("candidates") or [])


@dataclass
class ParsedActor:
    name: str
    cameo_actor_code: str | None = None


@dataclass
class ParsedEvent:
    cameo_event_code: str
    actor1_name: str | None = None
    actor2_name: str | None = None


@dataclass
class ParsedActorsEvents:
    actors: list[ParsedActor] = field(default_factory=list)
    events: list[ParsedEvent] = field(default_factory=list)
    cap_category: str | None = None
    incident_label: str | None = None
    incident_description: str | None = None

    def check(self) -> list[str]:
        out = []
        names = [a.name for a in self.actors]
        if len(names) != len(set(names)):
            out.append("duplicate actor names")
        if any(not n.strip() for n in names):
            out.append("empty actor name")
        for ev in self.events:
            for name in (ev.actor1_name, ev.actor2_name):
                if name is not None and name not in names:
                    out.append(f"event actor {name!r} not among actors")
        if self.cap_category is not None and self.cap_category not in CAP_CATEGORIES:
            out.append(f"cap category {self.cap_category!r} not a CAP token")
        if self.incident_label is not None and not self.incident_label.strip():
            out.append("incident label empty")
        return out


@dataclass
class CaptionResult:
    caption: str
    noteworthy: bool = False
    tags: list[str] = field(default_factory=list)

    def check(self) -> list[str]:
        out = []
        if not self.caption.strip():
            out.append("caption empty")
        if any(not isinstance(t, str) or not t.strip() for t in self.tags):
            out.append("blank tag")
        return out


@dataclass
class LinkDecision:
    linked_incident_ids: list[str] = field(default_factory=list)
    rationale: str = ""

    def check(self, offered: set[str]) -> list[str]:
        out = []
        if len(self.linked_incident_ids) != len(set(self.linked_incident_ids)):
            out.append("duplicate linked ids")
        for lid in self.linked_incident_ids:
            if lid not in offered:
                out.append(f"linked id {lid!r} was not offered")
        return out


@dataclass
class MergeDecision:
    same_as: str | None = None
    part_of: str | None = None
    rationale: str = ""

    def check(self, offered: set[str], allow_part_of: bool = True) -> list[str]:
        out = []
        if self.same_as is not None and self.same_as not in offered:
            out.append(f"same_as {self.same_as!r} was not offered")
        if self.part_of is not None:
            if not allow_part_of:
                out.append("part_of not allowed for this task")
            elif self.part_of not in offered:
                out.append(f"part_of {self.part_of!r} was not offered")
        if self.same_as is not None and self.same_as == self.part_of:
            out.append("same_as and part_of name the same id")
        return out


InferenceResult = ParsedActorsEvents | CaptionResult | LinkDecision | MergeDecision


class Backend(Protocol):
    def complete(self, request: BackendRequest, prompt: str) -> str:
        ...


# ---------------------------------------------------------------------------
# Prompt rendering

def _load_template(task: InferenceTask) -> str:
    ref = importlib.resources.files("urbankg").joinpath("data/prompts", _TEMPLATE_FILES[task])
    return ref.read_text(encoding="utf-8")


def render_candidates(candidates: list[Candidate]) -> str:
    if not candidates:
        return "(none)"
    lines = []
    for i, c in enumerate(candidates, start=1):
        lines.append(f"{i}. id={c.id} | label={c.label} | summary={c.summary}")
    return "\n".join(lines)


def render_prompt(request: BackendRequest) -> str:
    """Fill the task's template with the request context."""
    context = dict(request.prompt_context)
    if "candidates" in context:
        context["candidates"] = render_candidates(request.candidates())
    if "alt_names" in context:
        alts = context["alt_names"] or []
        context["alt_names"] = ", ".join(alts) if alts else "(none)"
    template = _load_template(request.task)
    return template.format(**context)


def validate_request(request: BackendRequest) -> None:
    if not isinstance(request.task, InferenceTask):
        raise MalformedOutput(str(request.task), "unknown task")
    for key in _REQUIRED_CONTEXT[request.task]:
        if key not in request.prompt_context:
            raise MalformedOutput(request.task.value, f"prompt context missing {key!r}")
    if request.task in _CANDIDATE_TASKS:
        cands = request.candidates()
        if len(cands) > request.max_candidates:
            raise MalformedOutput(
                request.task.value,
                f"{len(cands)} candidates exceed the {request.max_candidates} cap",
            )
        for c in cands:
            if not isinstance(c, Candidate) or not c.id:
                raise MalformedOutput(request.task.value, "candidate entries need ids")


# ---------------------------------------------------------------------------
# Response parsing

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def _extract_fenced_json(task: str, raw: str) -> dict:
    m = _FENCE_RE.search(raw)
    if not m:
        raise MalformedOutput(task, "no fenced JSON block in backend output")
    try:
        payload = json.loads(m.group(1))
    except ValueError as exc:
        raise MalformedOutput(task, f"fenced block is not JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedOutput(task, "fenced JSON is not an object")
    return payload


def _opt_str(payload: dict, key: str, task: str) -> str | None:
    value = payload.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise MalformedOutput(task, f"{key} must be a string or null")
    return value


def _build_result(request: BackendRequest, payload: dict) -> InferenceResult:
    task = request.task
    name = task.value
    if task is InferenceTask.ACTOR_EVENT_PARSE:
        actors = []
        for entry in payload.get("actors") or []:
            if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
                raise MalformedOutput(name, "actor entries need a name")
            actors.append(ParsedActor(entry["name"], _opt_str(entry, "cameo_actor_code", name)))
        events = []
        for entry in payload.get("events") or []:
            if not isinstance(entry, dict) or not isinstance(entry.get("cameo_event_code"), str):
                raise MalformedOutput(name, "event entries need a cameo_event_code")
            events.append(
                ParsedEvent(
                    entry["cameo_event_code"],
                    _opt_str(entry, "actor1", name),
                    _opt_str(entry, "actor2", name),
                )
            )
        incident = payload.get("incident")
        label = description = None
        if incident is not None:
            if not isinstance(incident, dict) or not isinstance(incident.get("label"), str):
                raise MalformedOutput(name, "incident needs a label")
            label = incident["label"]
            description = str(incident.get("description", ""))
        result: InferenceResult = ParsedActorsEvents(
            actors, events, _opt_str(payload, "cap_category", name), label, description
        )
        problems = result.check()
    elif task is InferenceTask.IMAGE_CAPTION:
        caption = payload.get("caption")
        if not isinstance(caption, str):
            raise MalformedOutput(name, "caption must be a string")
        tags = payload.get("tags") or []
        if not isinstance(tags, list):
            raise MalformedOutput(name, "tags must be a list")
        result = CaptionResult(caption, bool(payload.get("noteworthy", False)), [str(t) for t in tags])
        problems = result.check()
    elif task is InferenceTask.CROSS_MODAL_LINK:
        ids = payload.get("linked_incident_ids")
        if not isinstance(ids, list) or any(not isinstance(i, str) for i in ids):
            raise MalformedOutput(name, "linked_incident_ids must be a list of strings")
        result = LinkDecision(ids, str(payload.get("rationale", "")))
        problems = result.check({c.id for c in request.candidates()})
    else:
        result = MergeDecision(
            _opt_str(payload, "same_as", name),
            _opt_str(payload, "part_of", name),
            str(payload.get("rationale", "")),
        )
        problems = result.check(
            {c.id for c in request.candidates()},
            allow_part_of=task is InferenceTask.INCIDENT_MERGE,
        )
    if problems:
        raise CandidateViolation(name, "; ".join(problems))
    return result


def run(
    backend: Backend,
    request: BackendRequest,
    retries: int = DEFAULT_RETRIES,
    backoff: float = 0.25,
    sleep: Callable[[float], None] = time.sleep,
) -> InferenceResult:
    """Render, call, parse, validate; retry on any failure up to ``retries``.

    A link request with no candidates short-circuits to an empty
    decision without touching the backend.
    """
    validate_request(request)
    if request.task is InferenceTask.CROSS_MODAL_LINK and not request.candidates():
        return LinkDecision([], "no known incidents offered")
    prompt = render_prompt(request)
    last: BackendError | None = None
    for attempt in range(retries + 1):
        if attempt:
            sleep(backoff * (2 ** (attempt - 1)))
        try:
            raw = backend.complete(request, prompt)
            payload = _extract_fenced_json(request.task.value, raw)
            return _build_result(request, payload)
        except BackendError as exc:
            logger.warning("inference %s attempt %d failed: %s", request.task.value, attempt + 1, exc.detail)
            last = exc
    assert last is not None
    raise type(last)(last.task, last.detail, attempts=retries + 1)


# ---------------------------------------------------------------------------
# Rule-driven stub backend

# "same"/"partof" steer incident merges; "asame" steers actor merges.
_EFFECT_KINDS = ("actor", "event", "cap", "incident", "caption", "link", "same", "partof", "asame")


class StubRuleError(ValueError):
    pass


@dataclass
class StubRule:
    keyword: str
    effects: list[tuple[str, list[str]]]
    lineno: int


def normalize_text(text: str) -> str:
    out = []
    for ch in text.lower():
        out.append(ch if ch.isalnum() else " ")
    return " ".join("".join(out).split())


def _contains(haystack: str, needle: str) -> bool:
    return f" {needle} " in f" {haystack} "


def stub_rules_load(path: str | os.PathLike[str]) -> list[StubRule]:
    """Parse a keyword<TAB>effect rule file.

    Effects are ``kind:args`` joined by ``;`` with ``|`` separating
    arguments.  A repeated keyword replaces the earlier rule's effects.
    Raises StubRuleError with the offending line number.
    """
    rules: dict[str, StubRule] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise StubRuleError(f"line {lineno}: expected keyword<TAB>effect")
        keyword, effect_text = line.split("\t", 1)
        keyword = normalize_text(keyword)
        if not keyword:
            raise StubRuleError(f"line {lineno}: empty keyword")
        effects: list[tuple[str, list[str]]] = []
        for chunk in effect_text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            kind, _, arg_text = chunk.partition(":")
            kind = kind.strip()
            if kind not in _EFFECT_KINDS:
                raise StubRuleError(f"line {lineno}: unknown effect {kind!r}")
            args = [a.strip() for a in arg_text.split("|")] if arg_text else []
            if not args or not args[0]:
                raise StubRuleError(f"line {lineno}: effect {kind!r} needs an argument")
            effects.append((kind, args))
        if not effects:
            raise StubRuleError(f"line {lineno}: no effects")
        rules[keyword] = StubRule(keyword, effects, lineno)
    return list(rules.values())


def _fence(payload: dict) -> str:
    return "```json\n" + json.dumps(payload, sort_keys=True) + "\n```"


class StubBackend:
    """Deterministic keyword-rule backend used for fixtures and tests."""

    def __init__(self, rules: list[StubRule] | None = None):
        self.rules = rules or []

    def _matching(self, text: str) -> list[StubRule]:
        normalized = normalize_text(text)
        return [r for r in self.rules if _contains(normalized, r.keyword)]

    def complete(self, request: BackendRequest, prompt: str) -> str:
        ctx = request.prompt_context
        task = request.task
        if task is InferenceTask.ACTOR_EVENT_PARSE:
            return self._actor_event(str(ctx.get("text", "")))
        if task is InferenceTask.IMAGE_CAPTION:
            return self._caption(str(ctx.get("annotation") or ""))
        if task is InferenceTask.CROSS_MODAL_LINK:
            return self._link(str(ctx.get("report_summary", "")), request.candidates())
        if task is InferenceTask.INCIDENT_MERGE:
            text = " ".join(
                str(ctx.get(k, "")) for k in ("label", "description", "source_text")
            )
            return self._merge(text, request.candidates(), same_kind="same", part_kind="partof")
        if task is InferenceTask.ACTOR_MERGE:
            text = " ".join([str(ctx.get("name", ""))] + list(ctx.get("alt_names") or []))
            return self._merge(text, request.candidates(), same_kind="asame", part_kind=None)
        raise MalformedOutput(str(task), "stub cannot serve this task")

    def _actor_event(self, text: str) -> str:
        actors: list[dict] = []
        events: list[dict] = []
        cap: str | None = None
        incident: dict | None = None
        seen = set()

        def add_actor(name: str, code: str | None) -> None:
            if name and name not in seen:
                seen.add(name)
                actors.append({"name": name, "cameo_actor_code": code})

        for rule in self._matching(text):
            for kind, args in rule.effects:
                if kind == "actor":
                    add_actor(args[0], args[1] if len(args) > 1 and args[1] else None)
                elif kind == "event":
                    a1 = args[1] if len(args) > 1 and args[1] else None
                    a2 = args[2] if len(args) > 2 and args[2] else None
                    for name in (a1, a2):
                        if name:
                            add_actor(name, None)
                    events.append({"cameo_event_code": args[0], "actor1": a1, "actor2": a2})
                elif kind == "cap":
                    cap = args[0]
                elif kind == "incident":
                    incident = {
                        "label": args[0],
                        "description": args[1] if len(args) > 1 else "",
                    }
        return _fence(
            {"actors": actors, "events": events, "cap_category": cap, "incident": incident}
        )

    def _caption(self, annotation: str) -> str:
        caption = DEFAULT_CAPTION
        tags: list[str] = []
        noteworthy = False
        for rule in self._matching(annotation):
            for kind, args in rule.effects:
                if kind == "caption":
                    caption = args[0] if args and args[0] else DEFAULT_CAPTION
                    noteworthy = True
                    if rule.keyword not in tags:
                        tags.append(rule.keyword)
        return _fence({"caption": caption, "noteworthy": noteworthy, "tags": tags})

    def _link(self, summary: str, candidates: list[Candidate]) -> str:
        targets: list[str] = []
        matched_rules: list[str] = []
        for rule in self._matching(summary):
            for kind, args in rule.effects:
                if kind == "link":
                    targets.append(normalize_text(args[0]))
                    matched_rules.append(rule.keyword)
        linked: list[str] = []
        for cand in candidates:
            hay = normalize_text(f"{cand.label} {cand.summary}")
            if any(t and t in hay for t in targets) and cand.id not in linked:
                linked.append(cand.id)
        rationale = (
            f"matched rule keywords: {', '.join(matched_rules)}" if linked else "no rule matched"
        )
        return _fence({"linked_incident_ids": linked, "rationale": rationale})

    def _merge(
        self,
        text: str,
        candidates: list[Candidate],
        same_kind: str,
        part_kind: str | None,
    ) -> str:
        same_target: str | None = None
        part_target: str | None = None
        for rule in self._matching(text):
            for kind, args in rule.effects:
                if kind == same_kind:
                    same_target = normalize_text(args[0])
                elif part_kind is not None and kind == part_kind:
                    part_target = normalize_text(args[0])

        def find(target: str | None) -> str | None:
            if not target:
                return None
            for cand in candidates:
                if target in normalize_text(f"{cand.label} {cand.summary}"):
                    return cand.id
            return None

        same_id = find(same_target)
        part_id = find(part_target)
        if same_id is not None and part_id == same_id:
            part_id = None
        rationale = "stub rule decision" if (same_id or part_id) else "no rule matched"
        return _fence({"same_as": same_id, "part_of": part_id, "rationale": rationale})


# ---------------------------------------------------------------------------
# HTTP chat-completion backend

class HttpBackend:
    """Minimal JSON chat-completion client.

    Points at any endpoint speaking the common ``/chat/completions``
    wire shape.  Endpoint, model, and key come from the environment by
    default.
    """

    def __init__(self, endpoint: str, model: str, api_key: str = "", timeout: float = 60.0):
        if not endpoint:
            raise BackendUnreachable("http", "no endpoint configured")
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls) -> "HttpBackend":
        return cls(
            os.environ.get(ENV_ENDPOINT, ""),
            os.environ.get(ENV_MODEL, "default"),
            os.environ.get(ENV_API_KEY, ""),
        )

    def complete(self, request: BackendRequest, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        try:
            resp = requests.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            doc = resp.json()
        except requests.RequestException as exc:
            raise BackendUnreachable(request.task.value, f"http call failed: {exc}") from exc
        except ValueError as exc:
            raise MalformedOutput(request.task.value, f"response not JSON: {exc}") from exc
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedOutput(request.task.value, "no choices[0].message.content") from exc


class BoundedBackend:
    """Caps concurrent in-flight completions for a wrapped backend."""

    def __init__(self, inner: Backend, max_parallel: int = 4):
        self.inner = inner
        self._gate = threading.BoundedSemaphore(max_parallel)

    def complete(self, request: BackendRequest, prompt: str) -> str:
        with self._gate:
            return self.inner.complete(request, prompt)
