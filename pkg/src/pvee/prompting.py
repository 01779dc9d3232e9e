"""Prompt construction for extraction, few-shot demos, and data synthesis.

All instruction text lives in template files under ``templates/`` and is
substituted verbatim: the built message must equal the template byte for
byte after placeholder replacement. Extraction prompts run at temperature
0, synthesis prompts at 0.2.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .corpus import Instance
from .schema import (
    Event,
    EventType,
    KIND_ORDER,
    SUB_PARENT,
    prompt_label,
)

DEFAULT_MODEL = "gpt-3.5-turbo-0301"

# The final query segment shared by templates that support demonstrations.
_QUERY_MARKER = "Sentence: <SENTENCE> Output:"

PLACEHOLDERS = ("<SENTENCE>", "<OUTPUT>", "<CONST_DRUG>", "<CONST_EFFECT>",
                "<EVENT_TYPE>", "<SUBJECT>", "<TREATMENT>", "<EFFECT>",
                "<QUESTION>")


class PromptStrategy(Enum):
    SCHEMA = "schema"
    CODE = "code"
    EXPLANATION = "explanation"
    PIPELINE = "pipeline"


class SynthesisCategory(Enum):
    ADE = "ade"
    PTE = "pte"
    MULTI = "multi"


class UnknownSubKind(Exception):
    pass


class BudgetExhausted(Exception):
    pass


class MissingConstraint(Exception):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    temperature: float
    messages: tuple[tuple[str, str], ...]  # (role, content) pairs

    @property
    def cache_key(self) -> str:
        payload = json.dumps(
            {"model": self.model, "temperature": self.temperature,
             "messages": [{"role": r, "content": c} for r, c in self.messages]},
            sort_keys=True, ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Demonstration:
    instance: Instance
    rendered_answer: str


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files("pvee").joinpath("templates", f"{name}.txt")
    return path.read_text(encoding="utf-8").rstrip("\n")


@lru_cache(maxsize=None)
def load_question(kind: str) -> str:
    """The stage-2 question for a sub-argument kind."""
    if kind not in SUB_PARENT:
        raise UnknownSubKind(f"{kind!r} has no stage-2 question")
    return load_template(f"questions/{prompt_label(kind)}")


def _user_request(text: str, model: str, temperature: float) -> ChatRequest:
    return ChatRequest(model=model, temperature=temperature,
                       messages=(("user", text),))


def render_events_json(events, include_trigger: bool = False) -> str:
    """Events as the flat JSON shape the instructions request.

    Main arguments and their subs are flattened into one list using the
    prompt-facing labels (indication, subject_disorder, combination_drug).
    """
    out = []
    for ev in events:
        obj: dict = {"event_type": ev.event_type.display}
        if include_trigger:
            obj["event_trigger"] = ev.trigger.text if ev.trigger else ""
        args = []
        for arg in sorted(ev.arguments, key=lambda a: KIND_ORDER[a.kind]):
            if arg.span.text:
                args.append({"argument_type": prompt_label(arg.kind),
                             "argument_span": arg.span.text})
            for sub in sorted(arg.sub_arguments, key=lambda a: KIND_ORDER[a.kind]):
                if sub.span.text:
                    args.append({"argument_type": prompt_label(sub.kind),
                                 "argument_span": sub.span.text})
        obj["arguments"] = args
        out.append(obj)
    return json.dumps(out, ensure_ascii=False)


def render_demonstration(instance: Instance) -> Demonstration:
    return Demonstration(instance=instance,
                         rendered_answer=render_events_json(instance.events))


def build_zero_shot(strategy: PromptStrategy, sentence: str,
                    model: str = DEFAULT_MODEL) -> ChatRequest:
    name = ("pipeline_stage1" if strategy is PromptStrategy.PIPELINE
            else strategy.value)
    text = load_template(name).replace("<SENTENCE>", sentence)
    return _user_request(text, model, 0.0)


def build_pipeline_stage2(sentence: str, stage1_event, sub_kind: str,
                          model: str = DEFAULT_MODEL) -> ChatRequest:
    """Stage-2 question prompt; stage1_event carries the stage-1 strings.

    ``stage1_event`` is a mapping with event_type / subject / treatment /
    effect keys; values are substituted verbatim, empty strings included.
    """
    question = load_question(sub_kind)
    text = (
        load_template("pipeline_stage2")
        .replace("<SENTENCE>", sentence)
        .replace("<EVENT_TYPE>", str(stage1_event.get("event_type", "")))
        .replace("<SUBJECT>", str(stage1_event.get("subject", "")))
        .replace("<TREATMENT>", str(stage1_event.get("treatment", "")))
        .replace("<EFFECT>", str(stage1_event.get("effect", "")))
        .replace("<QUESTION>", question)
    )
    return _user_request(text, model, 0.0)


def estimate_tokens(text: str) -> int:
    # Rough budget estimate: four characters per token.
    return math.ceil(len(text) / 4)


def build_few_shot(
    sentence: str,
    demonstrations: dict[EventType, list[Demonstration]],
    base_instruction: str | None = None,
    model: str = DEFAULT_MODEL,
    budget_tokens: int = 4096,
) -> ChatRequest:
    """Assemble a few-shot prompt around a zero-shot instruction.

    Demonstrations come per event type with equal counts k (one example per
    event type per shot). They are interleaved by similarity rank, least
    similar first, so the most similar pair sits adjacent to the query.
    With k = 0 the output equals the zero-shot prompt. When the estimated
    token count exceeds the budget, whole shots are trimmed starting from
    the least similar; if a single shot still does not fit, BudgetExhausted.
    """
    if base_instruction is None:
        base_instruction = load_template("schema")
    if _QUERY_MARKER not in base_instruction:
        raise ValueError("base instruction lacks the query segment "
                         f"{_QUERY_MARKER!r}")
    counts = {len(v) for v in demonstrations.values()}
    if len(counts) > 1:
        raise ValueError(f"unequal demonstration counts per event type: "
                         f"{sorted(counts)}")
    k = counts.pop() if counts else 0
    prefix, suffix = base_instruction.split(_QUERY_MARKER, 1)

    def assemble(shots: int) -> str:
        blocks = []
        for rank in range(shots - 1, -1, -1):  # least similar first
            for et in EventType:
                demo = demonstrations[et][rank]
                blocks.append(f"Sentence: {demo.instance.text} "
                              f"Output: {demo.rendered_answer}\n")
        return (prefix + "".join(blocks)
                + _QUERY_MARKER.replace("<SENTENCE>", sentence) + suffix)

    shots = k
    text = assemble(shots)
    while shots > 1 and estimate_tokens(text) > budget_tokens:
        shots -= 1
        text = assemble(shots)
    if shots >= 1 and estimate_tokens(text) > budget_tokens:
        raise BudgetExhausted(
            f"single-shot prompt needs {estimate_tokens(text)} tokens, "
            f"budget is {budget_tokens}"
        )
    return _user_request(text, model, 0.0)


def synthesis_category(instance: Instance) -> SynthesisCategory:
    if len(instance.events) > 1:
        return SynthesisCategory.MULTI
    if instance.events and instance.events[0].event_type is EventType.POTENTIAL_THERAPEUTIC:
        return SynthesisCategory.PTE
    return SynthesisCategory.ADE


def build_synthesis_prompt(
    template_instance: Instance,
    constraint,
    category: SynthesisCategory | None = None,
    model: str = DEFAULT_MODEL,
) -> ChatRequest:
    """Data-generation prompt seeded with a training example.

    ADE prompts constrain both drug and effect; PTE prompts constrain the
    drug only; multi-event prompts carry no constraint. ``constraint`` is a
    ConstraintPair (or None for multi).
    """
    if category is None:
        category = synthesis_category(template_instance)
    text = load_template(f"synthesis_{category.value}")
    if category is SynthesisCategory.ADE:
        if constraint is None or not constraint.drug or not constraint.effect:
            raise MissingConstraint("ADE synthesis needs a (drug, effect) pair")
        text = (text.replace("<CONST_DRUG>", constraint.drug)
                    .replace("<CONST_EFFECT>", constraint.effect))
    elif category is SynthesisCategory.PTE:
        if constraint is None or not constraint.drug:
            raise MissingConstraint("PTE synthesis needs a drug constraint")
        text = text.replace("<CONST_DRUG>", constraint.drug)
    rendered = render_events_json(template_instance.events, include_trigger=True)
    text = (text.replace("<SENTENCE>", template_instance.text)
                .replace("<OUTPUT>", rendered))
    return _user_request(text, model, 0.2)


def build_finetune_input(sentence: str) -> str:
    """Input side of a seq2seq training pair (instruction + schema + sentence)."""
    return load_template("finetune_input").replace("<SENTENCE>", sentence)
