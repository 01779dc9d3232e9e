"""Chat-completions client with a disk cache, plus extraction runs.

The wire format is the OpenAI-compatible chat/completions JSON. Every
request is keyed by a content digest; with a warm cache a run touches no
network at all (cache_only mode enforces that). Model output parsing is
deliberately tolerant: the first balanced JSON value is pulled out of
whatever prose or code fences surround it.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Instance, event_to_json
from .prompting import (
    ChatRequest,
    DEFAULT_MODEL,
    PromptStrategy,
    build_few_shot,
    build_pipeline_stage2,
    build_zero_shot,
    load_template,
    render_demonstration,
)
from .retrieval import select_demonstrations
from .schema import (
    Argument,
    Event,
    MAIN_KINDS,
    SUB_KINDS,
    SUB_PARENT,
    Span,
    ground_spans,
    normalize_argument_kind,
    normalize_event_type,
)

log = logging.getLogger(__name__)


class NetworkError(Exception):
    pass


class AuthError(Exception):
    pass


class CacheMiss(Exception):
    pass


class Unparseable(Exception):
    pass


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str | None = None
    usage: dict = field(default_factory=dict)
    from_cache: bool = False


class ResponseCache:
    """One JSON file per request digest; entries are write-once."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        obj = json.loads(path.read_text(encoding="utf-8"))["response"]
        return ChatResponse(content=obj["content"],
                            finish_reason=obj.get("finish_reason"),
                            usage=obj.get("usage", {}), from_cache=True)

    def put(self, key: str, request_payload: dict, response: ChatResponse) -> None:
        path = self._path(key)
        if path.exists():
            return  # write-once: the first stored response wins
        obj = {"request": request_payload,
               "response": {"content": response.content,
                            "finish_reason": response.finish_reason,
                            "usage": response.usage}}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True),
                       encoding="utf-8")
        tmp.replace(path)


class LlmClient:
    """Completion client with retry/backoff and optional cache-only mode."""

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 cache: ResponseCache | None = None, cache_only: bool = False,
                 max_attempts: int = 5, backoff_base: float = 1.0,
                 backoff_factor: float = 2.0, timeout: float = 60.0,
                 session=None, sleep=time.sleep):
        self.endpoint = endpoint
        self.api_key = api_key
        self.cache = cache
        self.cache_only = cache_only
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.timeout = timeout
        self._session = session
        self._sleep = sleep

    def _payload(self, request: ChatRequest) -> dict:
        return {"model": request.model, "temperature": request.temperature,
                "messages": [{"role": r, "content": c}
                             for r, c in request.messages]}

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        if self.cache_only:
            raise CacheMiss(f"no cached response for {key}")
        if not self.endpoint:
            raise NetworkError("no endpoint configured")
        response = self._post(self._payload(request))
        if self.cache is not None:
            self.cache.put(key, self._payload(request), response)
        return response

    def _post(self, payload: dict) -> ChatResponse:
        import requests

        if self._session is None:
            self._session = requests.Session()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
            try:
                resp = self._session.post(self.endpoint, json=payload,
                                          headers=headers, timeout=self.timeout)
            except Exception as exc:  # connection errors are retryable
                last_error = exc
                continue
            status = getattr(resp, "status_code", 0)
            if status in (401, 403):
                raise AuthError(f"endpoint returned {status}")
            if status == 429 or status >= 500:
                last_error = NetworkError(f"endpoint returned {status}")
                continue
            if status != 200:
                raise NetworkError(f"endpoint returned {status}")
            data = resp.json()
            choice = data["choices"][0]
            return ChatResponse(content=choice["message"]["content"],
                                finish_reason=choice.get("finish_reason"),
                                usage=data.get("usage", {}))
        raise NetworkError(
            f"giving up after {self.max_attempts} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Output parsing


def _balanced_end(text: str, start: int) -> int | None:
    stack = []
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        c = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
            continue
        if c == '"':
            in_string = True
        elif c in "[{":
            stack.append(c)
        elif c in "]}":
            if not stack or {"]": "[", "}": "{"}[c] != stack.pop():
                return None
            if not stack:
                return i + 1
    return None


def extract_json(text: str):
    """First balanced JSON value in free text, or None.

    Code fences and surrounding prose are ignored; candidates that fail
    json.loads are skipped in favor of later ones.
    """
    cleaned = text.replace("```json", "```")
    segments = []
    if "```" in cleaned:
        parts = cleaned.split("```")
        segments.extend(parts[1::2])  # fenced blocks first
    segments.append(cleaned)
    for segment in segments:
        pos = 0
        while True:
            starts = [i for i in (segment.find("[", pos), segment.find("{", pos))
                      if i != -1]
            if not starts:
                break
            start = min(starts)
            end = _balanced_end(segment, start)
            if end is None:
                pos = start + 1
                continue
            try:
                return json.loads(segment[start:end])
            except json.JSONDecodeError:
                pos = start + 1
    return None


_NA_VALUES = {"", "n/a", "na", "none", "null"}


def _clean_span_text(value) -> str:
    text = str(value).strip().strip('"').strip()
    return "" if text.lower() in _NA_VALUES else text


def events_from_json(data, sentence: str, warnings: list[str]) -> list[Event]:
    """Map model JSON (flat argument lists) onto the event hierarchy.

    Sub-arguments attach to the unique main argument of their parent kind;
    with several candidates, the one whose grounded extent contains the sub
    span wins, else the first. A missing parent is synthesized with empty
    text. Unknown labels are dropped with a warning; "N/A" spans are omitted.
    """
    if isinstance(data, dict):
        data = data.get("events", data.get("output", [data]))
    if not isinstance(data, list):
        raise Unparseable("model output is not an event list")
    events = []
    for ev_obj in data:
        if not isinstance(ev_obj, dict):
            warnings.append(f"skipped non-object event entry {ev_obj!r}")
            continue
        et = normalize_event_type(str(ev_obj.get("event_type", "")))
        if et is None:
            warnings.append(
                f"dropped event with unknown type {ev_obj.get('event_type')!r}")
            continue
        trigger = None
        trig_text = _clean_span_text(ev_obj.get("event_trigger", ""))
        if trig_text:
            trigger = Span(text=trig_text)
        flat: list[tuple[str, str]] = []
        for arg_obj in ev_obj.get("arguments", ()) or ():
            if not isinstance(arg_obj, dict):
                warnings.append(f"skipped non-object argument {arg_obj!r}")
                continue
            label = arg_obj.get("argument_type", arg_obj.get("type", ""))
            kind = normalize_argument_kind(str(label))
            if kind is None:
                warnings.append(f"dropped argument with unknown type {label!r}")
                continue
            text = _clean_span_text(
                arg_obj.get("argument_span", arg_obj.get("text", "")))
            if not text:
                continue
            flat.append((kind, text))
        events.append(_assemble_event(et, trigger, flat, sentence))
    return ground_spans(events, sentence) if sentence else events


def _first_match(sentence: str, text: str) -> tuple[int, int] | None:
    i = sentence.lower().find(text.lower())
    return (i, i + len(text)) if i != -1 else None


def _assemble_event(et, trigger, flat, sentence) -> Event:
    mains: list[tuple[str, str, list]] = []  # (kind, text, subs)
    for kind, text in flat:
        if kind in MAIN_KINDS:
            mains.append((kind, text, []))
    for kind, text in flat:
        if kind in MAIN_KINDS:
            continue
        parent = SUB_PARENT[kind]
        candidates = [m for m in mains if m[0] == parent]
        if not candidates:
            synthesized = (parent, "", [])
            mains.append(synthesized)
            candidates = [synthesized]
        target = candidates[0]
        if len(candidates) > 1 and sentence:
            sub_pos = _first_match(sentence, text)
            if sub_pos is not None:
                for cand in candidates:
                    pos = _first_match(sentence, cand[1]) if cand[1] else None
                    if pos and pos[0] <= sub_pos[0] and sub_pos[1] <= pos[1]:
                        target = cand
                        break
        target[2].append(Argument(kind, Span(text=text)))
    arguments = tuple(
        Argument(kind, Span(text=text), tuple(subs))
        for kind, text, subs in mains
    )
    return Event(et, trigger=trigger, arguments=arguments)


def parse_events_output(text: str, sentence: str) -> tuple[list[Event], list[str]]:
    """Parse an end-to-end extraction reply into grounded events."""
    data = extract_json(text)
    if data is None:
        raise Unparseable("no JSON value found in model output")
    warnings: list[str] = []
    events = events_from_json(data, sentence, warnings)
    return events, warnings


# ---------------------------------------------------------------------------
# Extraction runs


@dataclass
class ExtractionConfig:
    strategy: PromptStrategy = PromptStrategy.SCHEMA
    shots: int = 0
    select: str = "bm25"
    model: str = DEFAULT_MODEL
    seed: int = 0
    budget_tokens: int = 4096
    concurrency: int = 4
    subpath_len: int = 3


def _stage1_events(content: str, warnings: list[str]) -> list[dict]:
    data = extract_json(content)
    if data is None:
        raise Unparseable("no JSON value found in stage-1 output")
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise Unparseable("stage-1 output is not an event list")
    out = []
    for obj in data:
        if not isinstance(obj, dict):
            warnings.append(f"skipped non-object stage-1 entry {obj!r}")
            continue
        et = normalize_event_type(str(obj.get("event_type", "")))
        if et is None:
            warnings.append(
                f"dropped stage-1 event with unknown type "
                f"{obj.get('event_type')!r}")
            continue
        out.append({
            "event_type": str(obj.get("event_type", "")),
            "_type": et,
            "subject": _clean_span_text(obj.get("subject", "")),
            "treatment": _clean_span_text(obj.get("treatment", "")),
            "effect": _clean_span_text(obj.get("effect", "")),
        })
    return out


def _run_pipeline(instance: Instance, client: LlmClient,
                  config: ExtractionConfig) -> tuple[list[Event], str, list[str]]:
    warnings: list[str] = []
    stage1 = client.complete(build_zero_shot(PromptStrategy.PIPELINE,
                                             instance.text, config.model))
    events = []
    for ev in _stage1_events(stage1.content, warnings):
        flat = [(kind, ev[kind]) for kind in MAIN_KINDS if ev[kind]]
        # All 13 questions are asked, present stage-1 fields or not.
        for sub_kind in SUB_KINDS:
            request = build_pipeline_stage2(instance.text, ev, sub_kind,
                                            config.model)
            answer = client.complete(request)
            text = _clean_span_text(answer.content)
            if text:
                flat.append((sub_kind, text))
        events.append(_assemble_event(ev["_type"], None, flat, instance.text))
    return ground_spans(events, instance.text), stage1.content, warnings


def _demonstrations(instance: Instance, pool, config: ExtractionConfig,
                    embeddings, trees):
    selected = select_demonstrations(
        config.select, instance, pool, config.shots, config.seed,
        embeddings=embeddings, trees=trees, subpath_len=config.subpath_len)
    return {et: [render_demonstration(inst) for inst in ranked]
            for et, ranked in selected.items()}


def _extract_one(instance: Instance, client: LlmClient,
                 config: ExtractionConfig, pool, embeddings, trees) -> dict:
    record: dict = {"id": instance.id, "events": [], "raw_text": None,
                    "warnings": []}
    try:
        if config.strategy is PromptStrategy.PIPELINE:
            events, raw, warnings = _run_pipeline(instance, client, config)
        else:
            if config.shots > 0:
                demos = _demonstrations(instance, pool, config, embeddings, trees)
                request = build_few_shot(
                    instance.text, demos,
                    base_instruction=load_template(config.strategy.value),
                    model=config.model, budget_tokens=config.budget_tokens)
            else:
                request = build_zero_shot(config.strategy, instance.text,
                                          config.model)
            response = client.complete(request)
            raw = response.content
            try:
                events, warnings = parse_events_output(raw, instance.text)
            except Unparseable as exc:
                events, warnings = [], [f"unparseable output: {exc}"]
        record["events"] = [event_to_json(ev) for ev in events]
        record["raw_text"] = raw
        record["warnings"] = warnings
    except Exception as exc:  # per-instance isolation: record and continue
        log.warning("instance %s failed: %s", instance.id, exc)
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def run_extraction(instances, client: LlmClient, config: ExtractionConfig,
                   pool=(), embeddings=None, trees=None) -> list[dict]:
    """Extract events for every instance; failures never abort the run.

    Records come back sorted by instance id, so output files are stable
    regardless of concurrency.
    """
    if config.shots > 0 and config.strategy is PromptStrategy.PIPELINE:
        raise ValueError("few-shot pipeline prompting is not supported")
    if config.shots > 0 and config.strategy is PromptStrategy.CODE:
        raise ValueError("the code instruction has no demonstration segment")
    work = list(instances)
    if config.concurrency > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool_exec:
            records = list(pool_exec.map(
                lambda inst: _extract_one(inst, client, config, pool,
                                          embeddings, trees), work))
    else:
        records = [_extract_one(inst, client, config, pool, embeddings, trees)
                   for inst in work]
    return sorted(records, key=lambda r: r["id"])


def write_predictions(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True)
                     + "\n")


def load_predictions(path) -> dict[str, list[Event]]:
    """Prediction file -> events per instance id (offsets taken on trust)."""
    out: dict[str, list[Event]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            events = []
            for ev_obj in obj.get("events", ()):
                et = normalize_event_type(ev_obj.get("event_type", ""))
                if et is None:
                    continue
                trigger = None
                if ev_obj.get("trigger"):
                    trigger = _span_from_loose(ev_obj["trigger"])
                args = []
                for arg_obj in ev_obj.get("arguments", ()):
                    kind = normalize_argument_kind(arg_obj.get("type", ""))
                    if kind is None:
                        continue
                    subs = tuple(
                        Argument(sk, _span_from_loose(s))
                        for s in arg_obj.get("sub_arguments", ())
                        if (sk := normalize_argument_kind(s.get("type", "")))
                    )
                    args.append(Argument(kind, _span_from_loose(arg_obj), subs))
                events.append(Event(et, trigger=trigger, arguments=tuple(args)))
            out[obj["id"]] = events
    return out


def _span_from_loose(obj) -> Span:
    start, end = obj.get("start"), obj.get("end")
    grounded = isinstance(start, int) and isinstance(end, int)
    return Span(text=str(obj.get("text", "")),
                start=start if grounded else None,
                end=end if grounded else None, grounded=grounded)
