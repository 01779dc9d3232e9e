"""Event taxonomy, span grounding, and the bracketed linearization codec.

The taxonomy is closed: two event categories and a two-level argument
hierarchy. Main arguments (subject, treatment, effect) carry nested
sub-arguments; effect has none. Event lists are encoded for sequence
models as bracketed strings, for example:

    [ adverse event [ subject two patients [ age 46-year-old ] ] [ effect rash ] ]

``linearize`` and ``parse_linearized`` are exact inverses on canonical
event lists (spans compare ungrounded). ``[``, ``]``, and ``\\`` inside
span text are escaped with a backslash.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum


class EventType(Enum):
    ADVERSE = "adverse_event"
    POTENTIAL_THERAPEUTIC = "potential_therapeutic_event"

    @property
    def display(self) -> str:
        """Human-facing name used in prompts and in the linearization."""
        return self.value.replace("_", " ")


MAIN_KINDS = ("subject", "treatment", "effect")

# Sub-argument kind -> parent main kind. Listed in taxonomy order.
SUB_PARENT = {
    "age": "subject",
    "gender": "subject",
    "race": "subject",
    "population": "subject",
    "subject.disorder": "subject",
    "drug": "treatment",
    "dosage": "treatment",
    "route": "treatment",
    "duration": "treatment",
    "frequency": "treatment",
    "time_elapsed": "treatment",
    "treatment.disorder": "treatment",
    "combination.drug": "treatment",
}

SUB_KINDS = tuple(SUB_PARENT)
ALL_KINDS = MAIN_KINDS + SUB_KINDS

# Canonical child ordering: each main followed by its subs, effect last.
_TAXONOMY_SEQUENCE = (
    "subject", "age", "gender", "race", "population", "subject.disorder",
    "treatment", "drug", "dosage", "route", "duration", "frequency",
    "time_elapsed", "treatment.disorder", "combination.drug",
    "effect",
)
KIND_ORDER = {kind: i for i, kind in enumerate(_TAXONOMY_SEQUENCE)}

# Ingest aliases (prompt-facing and underscore variants) -> canonical kind.
_KIND_ALIASES = {
    "subject_disorder": "subject.disorder",
    "indication": "treatment.disorder",
    "treatment_disorder": "treatment.disorder",
    "combination_drug": "combination.drug",
}

# Canonical kind -> label used in prompts and model-facing JSON.
_PROMPT_LABELS = {
    "subject.disorder": "subject_disorder",
    "treatment.disorder": "indication",
    "combination.drug": "combination_drug",
}

_EVENT_ALIASES = {
    "adverse event": EventType.ADVERSE,
    "adverse_event": EventType.ADVERSE,
    "potential therapeutic event": EventType.POTENTIAL_THERAPEUTIC,
    "potential_therapeutic_event": EventType.POTENTIAL_THERAPEUTIC,
}


def normalize_event_type(label: str) -> EventType | None:
    key = " ".join(str(label).lower().replace("_", " ").split())
    return _EVENT_ALIASES.get(key.replace(" ", "_"), _EVENT_ALIASES.get(key))


def normalize_argument_kind(label: str) -> str | None:
    """Map an external argument label to its canonical kind, or None."""
    key = " ".join(str(label).lower().split()).replace(" ", "_")
    if key in KIND_ORDER:
        return key
    return _KIND_ALIASES.get(key)


def prompt_label(kind: str) -> str:
    """Label used for a kind in prompts ('indication', 'subject_disorder', ...)."""
    return _PROMPT_LABELS.get(kind, kind)


@dataclass(frozen=True)
class Span:
    """A text span, optionally grounded to character offsets in its sentence."""

    text: str
    start: int | None = None
    end: int | None = None
    grounded: bool = False


@dataclass(frozen=True)
class Argument:
    kind: str
    span: Span
    sub_arguments: tuple["Argument", ...] = ()


@dataclass(frozen=True)
class Event:
    event_type: EventType
    trigger: Span | None = None
    arguments: tuple[Argument, ...] = ()


def validate_events(events, sentence: str | None = None) -> None:
    """Raise ValueError on taxonomy violations or out-of-bounds grounding."""
    for ev in events:
        if not isinstance(ev.event_type, EventType):
            raise ValueError(f"unknown event type {ev.event_type!r}")
        if ev.trigger is not None:
            _validate_span(ev.trigger, sentence)
        for arg in ev.arguments:
            if arg.kind not in MAIN_KINDS:
                raise ValueError(f"kind {arg.kind!r} is not a main argument kind")
            _validate_span(arg.span, sentence)
            for sub in arg.sub_arguments:
                if SUB_PARENT.get(sub.kind) != arg.kind:
                    raise ValueError(
                        f"sub-argument {sub.kind!r} cannot attach to {arg.kind!r}"
                    )
                if sub.sub_arguments:
                    raise ValueError("sub-arguments cannot nest further")
                _validate_span(sub.span, sentence)


def _validate_span(span: Span, sentence: str | None) -> None:
    if span.grounded:
        if span.start is None or span.end is None or not 0 <= span.start < span.end:
            raise ValueError(f"grounded span {span.text!r} has invalid offsets")
        if sentence is not None:
            if span.end > len(sentence):
                raise ValueError(f"span {span.text!r} exceeds sentence bounds")
            if sentence[span.start:span.end] != span.text:
                raise ValueError(
                    f"span text {span.text!r} does not match sentence slice"
                )


# ---------------------------------------------------------------------------
# Linearization


class MalformedLinearization(Exception):
    """Raised by parse_linearized; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


_LABELS: dict[str, tuple] = {}
for _et in EventType:
    _LABELS[_et.display] = ("event", _et)
_LABELS["trigger"] = ("trigger", None)
for _kind in _TAXONOMY_SEQUENCE:
    _LABELS[_kind] = ("kind", _kind)

# Longest label first so "adverse event" wins over any shorter prefix.
# Multi-word labels tolerate repeated whitespace; a label must be followed
# by whitespace, a bracket, a backslash, or end of input.
_LABEL_PATTERNS = [
    (
        label,
        re.compile(
            r"\s+".join(re.escape(w) for w in label.split()) + r"(?=$|[\s\[\]\\])"
        ),
    )
    for label in sorted(_LABELS, key=len, reverse=True)
]

_ESCAPE_RE = re.compile(r"([\\\[\]])")


def _escape(text: str) -> str:
    return _ESCAPE_RE.sub(r"\\\1", text)


def linearize(events, include_trigger: bool = True) -> str:
    """Encode events as a bracketed string. An empty list encodes to ''.

    Children are emitted in fixed taxonomy order; same-kind arguments keep
    their input order (stable sort, never content sorting).
    """
    return " ".join(_render_event(ev, include_trigger) for ev in events)


def _render_event(ev: Event, include_trigger: bool) -> str:
    bits = ["[", ev.event_type.display]
    if include_trigger and ev.trigger is not None and ev.trigger.text:
        bits.append(_render_node("trigger", ev.trigger.text, ()))
    for arg in sorted(ev.arguments, key=lambda a: KIND_ORDER[a.kind]):
        subs = tuple(
            _render_node(sub.kind, sub.span.text, ())
            for sub in sorted(arg.sub_arguments, key=lambda a: KIND_ORDER[a.kind])
        )
        bits.append(_render_node(arg.kind, arg.span.text, subs))
    bits.append("]")
    return " ".join(bits)


def _render_node(label: str, text: str, children: tuple[str, ...]) -> str:
    bits = ["[", label]
    if text:
        bits.append(_escape(text))
    bits.extend(children)
    bits.append("]")
    return " ".join(bits)


@dataclass
class _Node:
    label: str
    info: tuple | None  # None for unknown labels
    text: str
    children: list["_Node"]
    pos: int


def parse_linearized(
    s: str, recover: bool = False, warnings: list[str] | None = None
) -> list[Event]:
    """Decode a bracketed string back to events.

    Strict mode raises MalformedLinearization (with a character position)
    on any structural problem. With recover=True, offending subtrees are
    dropped and a note is appended to ``warnings``; bracket imbalance and
    bad escapes still raise, since no subtree boundary can be recovered.
    """
    sink = warnings if warnings is not None else []
    events: list[Event] = []
    pos = _skip_ws(s, 0)
    while pos < len(s):
        if s[pos] != "[":
            raise MalformedLinearization(f"expected '[' but found {s[pos]!r}", pos)
        node, pos = _parse_node(s, pos, recover, sink)
        ev = _node_to_event(node, recover, sink)
        if ev is not None:
            events.append(ev)
        pos = _skip_ws(s, pos)
    return events


def _skip_ws(s: str, pos: int) -> int:
    while pos < len(s) and s[pos].isspace():
        pos += 1
    return pos


def _match_label(s: str, pos: int) -> tuple[str, tuple | None, int]:
    for label, pattern in _LABEL_PATTERNS:
        m = pattern.match(s, pos)
        if m:
            return label, _LABELS[label], m.end()
    # No known label: consume the raw word so the caller can report or drop it.
    end = pos
    while end < len(s) and not s[end].isspace() and s[end] not in "[]\\":
        end += 1
    if end == pos:
        raise MalformedLinearization("missing label", pos)
    return s[pos:end], None, end


def _parse_node(
    s: str, pos: int, recover: bool, warnings: list[str]
) -> tuple[_Node, int]:
    start = pos
    pos = _skip_ws(s, pos + 1)  # past '['
    label, info, pos = _match_label(s, pos)
    buf: list[str] = []
    children: list[_Node] = []
    stray: list[str] = []
    while True:
        if pos >= len(s):
            raise MalformedLinearization("unbalanced brackets", start)
        c = s[pos]
        if c == "\\":
            if pos + 1 >= len(s) or s[pos + 1] not in "[]\\":
                raise MalformedLinearization("bad escape", pos)
            (stray if children else buf).append(s[pos + 1])
            pos += 2
        elif c == "[":
            if stray and "".join(stray).strip():
                if not recover:
                    raise MalformedLinearization("text after children", pos)
                warnings.append(
                    f"dropped stray text {''.join(stray).strip()!r} in [ {label} ]"
                )
            stray = []
            child, pos = _parse_node(s, pos, recover, warnings)
            children.append(child)
        elif c == "]":
            tail = "".join(stray).strip()
            if tail:
                if not recover:
                    raise MalformedLinearization("text after children", pos)
                warnings.append(f"dropped stray text {tail!r} in [ {label} ]")
            return _Node(label, info, "".join(buf).strip(), children, start), pos + 1
        else:
            (stray if children else buf).append(c)
            pos += 1


def _reject(message: str, pos: int, recover: bool, warnings: list[str]) -> None:
    if not recover:
        raise MalformedLinearization(message, pos)
    warnings.append(message)


def _node_to_event(node: _Node, recover: bool, warnings: list[str]) -> Event | None:
    if node.info is None or node.info[0] != "event":
        _reject(f"unknown label {node.label!r}" if node.info is None
                else f"{node.label!r} cannot appear at the top level",
                node.pos, recover, warnings)
        return None
    if node.text:
        _reject(f"unexpected text {node.text!r} on event node", node.pos,
                recover, warnings)
    trigger: Span | None = None
    arguments: list[Argument] = []
    for child in node.children:
        if child.info is None:
            _reject(f"unknown label {child.label!r}", child.pos, recover, warnings)
            continue
        tag = child.info[0]
        if tag == "trigger":
            if child.children:
                _reject("trigger cannot have children", child.pos, recover, warnings)
                continue
            if trigger is not None:
                _reject("duplicate trigger", child.pos, recover, warnings)
                continue
            trigger = Span(text=child.text)
        elif tag == "kind" and child.info[1] in MAIN_KINDS:
            arg = _node_to_argument(child, recover, warnings)
            if arg is not None:
                arguments.append(arg)
        elif tag == "kind":
            _reject(f"sub-argument {child.label!r} outside a main argument",
                    child.pos, recover, warnings)
        else:
            _reject(f"nested event {child.label!r}", child.pos, recover, warnings)
    return Event(node.info[1], trigger=trigger, arguments=tuple(arguments))


def _node_to_argument(
    node: _Node, recover: bool, warnings: list[str]
) -> Argument | None:
    kind = node.info[1]
    subs: list[Argument] = []
    for child in node.children:
        if child.info is None:
            _reject(f"unknown label {child.label!r}", child.pos, recover, warnings)
            continue
        tag = child.info[0]
        if tag != "kind" or SUB_PARENT.get(child.info[1]) != kind:
            _reject(f"{child.label!r} cannot attach to {kind!r}", child.pos,
                    recover, warnings)
            continue
        if child.children:
            _reject(f"sub-argument {child.label!r} cannot have children",
                    child.pos, recover, warnings)
            continue
        subs.append(Argument(child.info[1], Span(text=child.text)))
    return Argument(kind, Span(text=node.text), tuple(subs))


# ---------------------------------------------------------------------------
# Grounding


def _fold(s: str) -> str:
    # Per-character lowercasing, keeping length (some Unicode chars expand).
    return "".join(c.lower() if len(c.lower()) == 1 else c for c in s)


def ground_spans(events, sentence: str) -> list[Event]:
    """Return new events with spans grounded against ``sentence``.

    Matching is case-insensitive on the first occurrence; when the same text
    appears in several spans, each later span takes the next occurrence not
    already consumed. A grounded span's text is rewritten to the sentence
    slice, so sentence[start:end] == text always holds. Spans whose text does
    not occur are returned unchanged (ungrounded).
    """
    if not sentence:
        raise ValueError("sentence must be non-empty")
    folded = _fold(sentence)
    consumed: list[tuple[int, int]] = []

    def ground(span: Span) -> Span:
        if not span.text:
            return span
        needle = _fold(span.text)
        occs = []
        i = folded.find(needle)
        while i != -1:
            occs.append(i)
            i = folded.find(needle, i + 1)
        if not occs:
            return span
        chosen = None
        for i in occs:
            if all(i + len(needle) <= a or i >= b for a, b in consumed):
                chosen = i
                consumed.append((i, i + len(needle)))
                break
        if chosen is None:
            chosen = occs[0]
        end = chosen + len(needle)
        return Span(text=sentence[chosen:end], start=chosen, end=end, grounded=True)

    out = []
    for ev in events:
        trig = ground(ev.trigger) if ev.trigger is not None else None
        args = []
        for arg in ev.arguments:
            subs = tuple(replace(sub, span=ground(sub.span)) for sub in arg.sub_arguments)
            args.append(Argument(arg.kind, ground(arg.span), subs))
        out.append(Event(ev.event_type, trigger=trig, arguments=tuple(args)))
    return out


def inject_null_arguments(events, ratio: float, rng) -> list[Event]:
    """Add empty-text arguments for absent kinds with probability ``ratio``.

    Training-target augmentation only (the rejection knob); ratio 0, the
    default everywhere, returns the events unchanged.
    """
    if ratio <= 0:
        return list(events)
    out = []
    for ev in events:
        args = list(ev.arguments)
        present_mains = {a.kind for a in args}
        rebuilt = []
        for arg in args:
            present_subs = {s.kind for s in arg.sub_arguments}
            subs = list(arg.sub_arguments)
            for kind, parent in SUB_PARENT.items():
                if parent == arg.kind and kind not in present_subs:
                    if rng.random() < ratio:
                        subs.append(Argument(kind, Span(text="")))
            rebuilt.append(Argument(arg.kind, arg.span, tuple(subs)))
        for kind in MAIN_KINDS:
            if kind not in present_mains and rng.random() < ratio:
                rebuilt.append(Argument(kind, Span(text="")))
        out.append(Event(ev.event_type, trigger=ev.trigger, arguments=tuple(rebuilt)))
    return out
