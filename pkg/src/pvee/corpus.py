"""Dataset loading, validation, annotation revision, splits, and folds.

Canonical dataset files are JSONL, one instance per line:

    {"id": "...", "text": "...", "events": [{"event_type": "adverse_event",
     "trigger": {"text": "...", "start": 3, "end": 12},
     "arguments": [{"type": "subject", "text": "...", "start": 0, "end": 11,
                    "sub_arguments": [{"type": "age", "text": "..."}]}]}]}

Offsets are optional but must come in (start, end) pairs that slice the
sentence to exactly the span text. A converter for the upstream PHEE release
layout is included; split labels and fold plans live in JSON sidecars.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .schema import (
    Argument,
    Event,
    EventType,
    MAIN_KINDS,
    SUB_PARENT,
    Span,
    normalize_argument_kind,
    normalize_event_type,
)

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")


class FormatError(Exception):
    """Structurally broken record; carries record id and field when known."""

    def __init__(self, message: str, record_id: str | None = None,
                 field_name: str | None = None):
        where = f" (record {record_id!r}, field {field_name!r})" if record_id else ""
        super().__init__(message + where)
        self.record_id = record_id
        self.field_name = field_name


class ValidationError(Exception):
    pass


class EmptyStratum(Exception):
    pass


@dataclass(frozen=True)
class Instance:
    id: str
    text: str
    events: tuple[Event, ...]
    origin: str = "human"


@dataclass
class Dataset:
    instances: tuple[Instance, ...]
    splits: dict[str, str] = field(default_factory=dict)

    def ids(self) -> list[str]:
        return [inst.id for inst in self.instances]

    def by_id(self) -> dict[str, Instance]:
        return {inst.id: inst for inst in self.instances}

    def split_instances(self, name: str) -> list[Instance]:
        return [inst for inst in self.instances if self.splits.get(inst.id) == name]


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    seed: int
    assignments: dict[str, int]

    def fold_ids(self, r: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == r)


def _derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Record (de)serialization


def _span_from_json(obj, rid: str, field_name: str, sentence: str) -> Span:
    if not isinstance(obj, dict):
        raise FormatError("span must be an object", rid, field_name)
    text = obj.get("text")
    if not isinstance(text, str) or not text:
        raise FormatError("span text must be a non-empty string", rid, field_name)
    start, end = obj.get("start"), obj.get("end")
    if (start is None) != (end is None):
        raise FormatError("span offsets must come in (start, end) pairs",
                          rid, field_name)
    if start is None:
        return Span(text=text)
    if not (isinstance(start, int) and isinstance(end, int)):
        raise FormatError("span offsets must be integers", rid, field_name)
    if not (0 <= start < end <= len(sentence)):
        raise ValidationError(
            f"record {rid!r}: span {text!r} offsets ({start}, {end}) out of bounds"
        )
    if sentence[start:end] != text:
        raise ValidationError(
            f"record {rid!r}: span text {text!r} does not match sentence slice "
            f"{sentence[start:end]!r}"
        )
    return Span(text=text, start=start, end=end, grounded=True)


def _event_from_json(obj, rid: str, sentence: str) -> Event:
    et = normalize_event_type(obj.get("event_type", ""))
    if et is None:
        raise ValidationError(
            f"record {rid!r}: unknown event type {obj.get('event_type')!r}"
        )
    trigger = None
    if obj.get("trigger") is not None:
        trigger = _span_from_json(obj["trigger"], rid, "trigger", sentence)
    arguments = []
    for arg_obj in obj.get("arguments", ()):
        kind = normalize_argument_kind(arg_obj.get("type", ""))
        if kind is None:
            raise ValidationError(
                f"record {rid!r}: unknown argument type {arg_obj.get('type')!r}"
            )
        if kind not in MAIN_KINDS:
            raise ValidationError(
                f"record {rid!r}: sub-argument kind {kind!r} at main level"
            )
        span = _span_from_json(arg_obj, rid, kind, sentence)
        subs = []
        for sub_obj in arg_obj.get("sub_arguments", ()):
            sub_kind = normalize_argument_kind(sub_obj.get("type", ""))
            if sub_kind is None or SUB_PARENT.get(sub_kind) != kind:
                raise ValidationError(
                    f"record {rid!r}: {sub_obj.get('type')!r} cannot attach "
                    f"to {kind!r}"
                )
            if sub_obj.get("sub_arguments"):
                raise ValidationError(
                    f"record {rid!r}: sub-arguments cannot nest further"
                )
            subs.append(Argument(sub_kind, _span_from_json(sub_obj, rid, sub_kind,
                                                           sentence)))
        arguments.append(Argument(kind, span, tuple(subs)))
    return Event(et, trigger=trigger, arguments=tuple(arguments))


def span_to_json(span: Span) -> dict:
    obj: dict = {"text": span.text}
    if span.grounded:
        obj["start"] = span.start
        obj["end"] = span.end
    return obj


def event_to_json(ev: Event) -> dict:
    obj: dict = {"event_type": ev.event_type.value}
    if ev.trigger is not None:
        obj["trigger"] = span_to_json(ev.trigger)
    obj["arguments"] = [
        {
            "type": arg.kind,
            **span_to_json(arg.span),
            **(
                {"sub_arguments": [{"type": s.kind, **span_to_json(s.span)}
                                   for s in arg.sub_arguments]}
                if arg.sub_arguments else {}
            ),
        }
        for arg in ev.arguments
    ]
    return obj


def instance_to_json(inst: Instance) -> dict:
    obj = {"id": inst.id, "text": inst.text,
           "events": [event_to_json(ev) for ev in inst.events]}
    if inst.origin != "human":
        obj["origin"] = inst.origin
    return obj


def instance_from_json(obj, line_no: int | None = None) -> Instance:
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise FormatError(f"missing or invalid id on line {line_no}")
    text = obj.get("text")
    if not isinstance(text, str) or not text:
        raise ValidationError(f"record {rid!r}: text must be a non-empty string")
    events_obj = obj.get("events")
    if not isinstance(events_obj, list):
        raise FormatError("events must be a list", rid, "events")
    events = tuple(_event_from_json(e, rid, text) for e in events_obj)
    origin = obj.get("origin", "human")
    if origin not in ("human", "synthesized"):
        raise FormatError(f"unknown origin {origin!r}", rid, "origin")
    return Instance(id=rid, text=text, events=events, origin=origin)


def load_dataset(path) -> Dataset:
    instances = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON on line {line_no}: {exc}") from exc
            inst = instance_from_json(obj, line_no)
            if inst.id in seen:
                raise FormatError("duplicate instance id", inst.id, "id")
            seen.add(inst.id)
            instances.append(inst)
    return Dataset(instances=tuple(instances))


def write_dataset(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst), ensure_ascii=False,
                                sort_keys=True) + "\n")


def load_splits(path) -> dict[str, str]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    splits = {}
    for name in SPLIT_NAMES:
        for rid in obj.get(name, ()):
            if rid in splits:
                raise FormatError("id assigned to two splits", rid, "splits")
            splits[rid] = name
    return splits


def write_splits(splits: dict[str, str], path) -> None:
    obj = {name: sorted(i for i, s in splits.items() if s == name)
           for name in SPLIT_NAMES}
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True,
                                     indent=2) + "\n", encoding="utf-8")


def load_fold_plan(path) -> FoldPlan:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return FoldPlan(n_folds=obj["n_folds"], seed=obj["seed"],
                    assignments={k: int(v) for k, v in obj["assignments"].items()})


def write_fold_plan(plan: FoldPlan, path) -> None:
    obj = {"n_folds": plan.n_folds, "seed": plan.seed,
           "assignments": plan.assignments}
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True,
                                     indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Upstream PHEE release layout


_PHEE_MAIN = {"subject": "subject", "treatment": "treatment", "effect": "effect"}


def _phee_key(key: str) -> str:
    return key.strip().lower().replace("-", "_").replace(".", "_").replace(" ", "_")


def _phee_sub_kind(key: str, parent: str) -> str | None:
    k = _phee_key(key)
    if k in ("disorder", "sub_disorder"):
        return f"{parent}.disorder"
    if k == "combination" or k == "combination_drug":
        return "combination.drug"
    kind = normalize_argument_kind(k)
    if kind is not None and SUB_PARENT.get(kind) == parent:
        return kind
    return None


def _phee_spans(value, context: str) -> list[Span]:
    """Flatten the release layout's nested text/start lists into spans.

    Offsets that do not slice the context to the text are dropped rather
    than propagated (the loader validates offsets strictly). Discontinuous
    parts are joined with a space and left ungrounded.
    """
    if not isinstance(value, dict):
        return []
    texts = value.get("text")
    starts = value.get("start")
    if texts is None:
        return []
    if isinstance(texts, str):
        texts = [[texts]]
    spans = []
    for i, entry in enumerate(texts):
        parts = entry if isinstance(entry, list) else [entry]
        parts = [str(p) for p in parts if str(p)]
        if not parts:
            continue
        if len(parts) == 1:
            text = parts[0]
            start = None
            if isinstance(starts, list) and i < len(starts):
                cand = starts[i]
                if isinstance(cand, list) and cand:
                    cand = cand[0]
                if isinstance(cand, int):
                    start = cand
            if start is not None and context[start:start + len(text)] == text:
                spans.append(Span(text=text, start=start, end=start + len(text),
                                  grounded=True))
            else:
                spans.append(Span(text=text))
        else:
            spans.append(Span(text=" ".join(parts)))
    return spans


def convert_phee_record(obj) -> Instance:
    rid = str(obj.get("id", ""))
    context = obj.get("context") or obj.get("text") or ""
    if not rid or not context:
        raise FormatError("release record needs id and context", rid or None)
    annotations = obj.get("annotations") or []
    events_obj = annotations[0].get("events", []) if annotations else []
    events = []
    for ev_obj in events_obj:
        et = normalize_event_type(ev_obj.get("event_type", ""))
        if et is None:
            raise ValidationError(
                f"record {rid!r}: unknown event type {ev_obj.get('event_type')!r}"
            )
        trigger = None
        arguments = []
        for key, value in ev_obj.items():
            k = _phee_key(key)
            if k in ("event_id", "event_type"):
                continue
            if k == "trigger":
                spans = _phee_spans(value, context)
                trigger = spans[0] if spans else None
                continue
            if k not in _PHEE_MAIN:
                continue
            kind = _PHEE_MAIN[k]
            subs = []
            if isinstance(value, dict):
                for sub_key, sub_val in value.items():
                    if sub_key in ("text", "start", "entity_id"):
                        continue
                    sub_kind = _phee_sub_kind(sub_key, kind)
                    if sub_kind is None:
                        continue
                    for span in _phee_spans(sub_val, context):
                        subs.append(Argument(sub_kind, span))
            for span in _phee_spans(value, context):
                arguments.append(Argument(kind, span, tuple(subs)))
                subs = []  # subs ride on the first span of the role
        events.append(Event(et, trigger=trigger, arguments=tuple(arguments)))
    return Instance(id=rid, text=context, events=tuple(events))


def convert_phee_file(path) -> list[Instance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                instances.append(convert_phee_record(json.loads(line)))
    return instances


# ---------------------------------------------------------------------------
# Annotation revision


def revise_subject_disorder(dataset: Dataset) -> tuple[Dataset, int]:
    """Copy treatment.disorder spans lying inside a subject extent.

    When a grounded treatment.disorder span falls inside a grounded subject
    argument's extent and that subject has no subject.disorder with identical
    text, the span is appended as a subject.disorder. Idempotent: a second
    pass adds nothing.
    """
    count = 0
    new_instances = []
    for inst in dataset.instances:
        new_events = []
        for ev in inst.events:
            disorders = [
                sub.span
                for arg in ev.arguments if arg.kind == "treatment"
                for sub in arg.sub_arguments
                if sub.kind == "treatment.disorder"
            ]
            if not disorders:
                new_events.append(ev)
                continue
            args = list(ev.arguments)
            for span in disorders:
                if not span.grounded:
                    log.warning("instance %s: ungrounded treatment.disorder %r "
                                "skipped by revision", inst.id, span.text)
                    continue
                target_idx = None
                for i, arg in enumerate(args):
                    if (arg.kind == "subject" and arg.span.grounded
                            and arg.span.start <= span.start
                            and span.end <= arg.span.end):
                        target_idx = i
                        break
                if target_idx is None:
                    continue
                target = args[target_idx]
                if any(s.kind == "subject.disorder" and s.span.text == span.text
                       for s in target.sub_arguments):
                    continue
                new_sub = Argument("subject.disorder",
                                   Span(text=span.text, start=span.start,
                                        end=span.end, grounded=True))
                args[target_idx] = Argument(target.kind, target.span,
                                            target.sub_arguments + (new_sub,))
                count += 1
            new_events.append(Event(ev.event_type, trigger=ev.trigger,
                                    arguments=tuple(args)))
        new_instances.append(Instance(inst.id, inst.text, tuple(new_events),
                                      inst.origin))
    return Dataset(tuple(new_instances), dict(dataset.splits)), count


# ---------------------------------------------------------------------------
# Splits and folds


def _stratum(inst: Instance) -> str:
    has_ade = any(ev.event_type is EventType.ADVERSE for ev in inst.events)
    has_pte = any(ev.event_type is EventType.POTENTIAL_THERAPEUTIC
                  for ev in inst.events)
    if has_ade and has_pte:
        return "both"
    if has_ade:
        return "adverse_only"
    if has_pte:
        return "potential_only"
    return "none"


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    short = n - sum(counts)
    # Distribute the remainder by descending fractional part; earlier split
    # wins ties so the allocation is deterministic.
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def make_splits(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Stratified split over event-type presence. Deterministic in ``seed``."""
    if len(ratios) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    strata: dict[str, list[str]] = {}
    for inst in dataset.instances:
        strata.setdefault(_stratum(inst), []).append(inst.id)
    splits: dict[str, str] = {}
    for label in sorted(strata):
        ids = sorted(strata[label])
        if len(ids) < len(SPLIT_NAMES):
            raise EmptyStratum(
                f"stratum {label!r} has {len(ids)} instances, fewer than "
                f"{len(SPLIT_NAMES)} splits"
            )
        rng = random.Random(_derive_seed(seed, f"split:{label}"))
        rng.shuffle(ids)
        counts = _largest_remainder(len(ids), ratios)
        pos = 0
        for name, c in zip(SPLIT_NAMES, counts):
            for rid in ids[pos:pos + c]:
                splits[rid] = name
            pos += c
    return Dataset(dataset.instances, splits)


def make_folds(dataset: Dataset, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Fold plan over train + validation; the test split never appears."""
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if not dataset.splits:
        raise ValueError("dataset has no split labels; run make_splits first")
    pool = sorted(i for i, s in dataset.splits.items()
                  if s in ("train", "validation"))
    if len(pool) < n_folds:
        raise ValueError(f"cannot cut {len(pool)} instances into {n_folds} folds")
    rng = random.Random(_derive_seed(seed, "folds"))
    rng.shuffle(pool)
    assignments = {rid: i % n_folds for i, rid in enumerate(pool)}
    return FoldPlan(n_folds=n_folds, seed=seed, assignments=assignments)
