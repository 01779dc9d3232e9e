"""Constraint-conditioned generation of synthetic training instances.

Each training instance serves once as a template. Adverse-event templates
get a (drug, effect) constraint pair sampled from the training data,
potential-therapeutic templates a drug-only constraint, and multi-event
templates run unconstrained. Generations that fail the constraint are kept
but flagged so downstream filters can exclude them.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .corpus import Dataset, Instance, _derive_seed, instance_to_json
from .llm_client import extract_json, events_from_json
from .prompting import DEFAULT_MODEL, SynthesisCategory, build_synthesis_prompt, synthesis_category
from .schema import EventType

log = logging.getLogger(__name__)


class NoQualifyingPairs(Exception):
    pass


class GenerationUnparseable(Exception):
    pass


@dataclass(frozen=True)
class ConstraintPair:
    drug: str
    effect: str | None
    source_instance_id: str


@dataclass(frozen=True)
class SynthesizedInstance:
    instance: Instance
    template_id: str
    constraint: ConstraintPair | None
    constraint_satisfied: bool
    parse_clean: bool


def _event_drugs(ev) -> list[str]:
    return [sub.span.text
            for arg in ev.arguments if arg.kind == "treatment"
            for sub in arg.sub_arguments
            if sub.kind in ("drug", "combination.drug") and sub.span.text]


def collect_ade_pairs(instances) -> list[ConstraintPair]:
    """Distinct (drug, effect) pairs co-occurring in one adverse event."""
    seen: dict[tuple[str, str], str] = {}
    for inst in instances:
        for ev in inst.events:
            if ev.event_type is not EventType.ADVERSE:
                continue
            effects = [arg.span.text for arg in ev.arguments
                       if arg.kind == "effect" and arg.span.text]
            for drug in _event_drugs(ev):
                for effect in effects:
                    seen.setdefault((drug, effect), inst.id)
    return [ConstraintPair(drug=d, effect=e, source_instance_id=rid)
            for (d, e), rid in sorted(seen.items())]


def collect_pte_drugs(instances) -> list[ConstraintPair]:
    seen: dict[str, str] = {}
    for inst in instances:
        for ev in inst.events:
            if ev.event_type is not EventType.POTENTIAL_THERAPEUTIC:
                continue
            for drug in _event_drugs(ev):
                seen.setdefault(drug, inst.id)
    return [ConstraintPair(drug=d, effect=None, source_instance_id=rid)
            for d, rid in sorted(seen.items())]


def sample_constraints(training_set, category: SynthesisCategory,
                       seed) -> ConstraintPair:
    """Uniform draw over the distinct qualifying constraints.

    ``seed`` may be an int or a random.Random, so callers can thread one
    generator through a whole run.
    """
    if category is SynthesisCategory.PTE:
        pool = collect_pte_drugs(training_set)
    else:
        pool = collect_ade_pairs(training_set)
    if not pool:
        raise NoQualifyingPairs(
            f"training set has no qualifying constraints for {category.value}")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    return pool[rng.randrange(len(pool))]


def parse_synthesis_output(text: str) -> tuple[str, object]:
    """Pull (sentence, output) out of the generation reply."""
    data = extract_json(text)
    if data is None:
        raise GenerationUnparseable("no JSON value found in generation output")
    if not isinstance(data, dict):
        raise GenerationUnparseable("generation output is not a JSON object")
    sentence = data.get("sentence")
    if not isinstance(sentence, str) or not sentence.strip():
        raise GenerationUnparseable("generation output lacks a sentence field")
    return sentence, data.get("output")


def synthesize(template_instance: Instance, constraint: ConstraintPair | None,
               client, model: str = DEFAULT_MODEL) -> SynthesizedInstance:
    category = synthesis_category(template_instance)
    request = build_synthesis_prompt(template_instance, constraint,
                                     category=category, model=model)
    response = client.complete(request)
    sentence, output = parse_synthesis_output(response.content)
    warnings: list[str] = []
    events = []
    parse_clean = False
    if output is not None:
        if isinstance(output, str):
            output = extract_json(output)
        if output is not None:
            try:
                events = events_from_json(output, sentence, warnings)
                parse_clean = bool(events) and not warnings
            except Exception as exc:
                warnings.append(f"output field unparseable: {exc}")
    satisfied = True
    if constraint is not None:
        lowered = sentence.lower()
        satisfied = constraint.drug.lower() in lowered
        if category is SynthesisCategory.ADE and constraint.effect:
            satisfied = satisfied and constraint.effect.lower() in lowered
    instance = Instance(id=f"syn-{template_instance.id}", text=sentence,
                        events=tuple(events), origin="synthesized")
    return SynthesizedInstance(instance=instance,
                               template_id=template_instance.id,
                               constraint=constraint,
                               constraint_satisfied=satisfied,
                               parse_clean=parse_clean)


def run_synthesis(train_instances, client, seed: int = 0,
                  model: str = DEFAULT_MODEL,
                  concurrency: int = 4) -> list[SynthesizedInstance]:
    """One generation per training instance; failures are logged and skipped.

    Constraints are sampled up front from a per-instance derived seed, so
    results do not depend on completion order.
    """
    templates = sorted(train_instances, key=lambda i: i.id)
    pool = list(templates)
    jobs = []
    for template in templates:
        category = synthesis_category(template)
        constraint = None
        if category is not SynthesisCategory.MULTI:
            rng = random.Random(_derive_seed(seed, f"synth:{template.id}"))
            try:
                constraint = sample_constraints(pool, category, rng)
            except NoQualifyingPairs:
                log.warning("no qualifying constraints for %s (%s); skipped",
                            template.id, category.value)
                continue
        jobs.append((template, constraint))

    def _one(job):
        template, constraint = job
        try:
            return synthesize(template, constraint, client, model=model)
        except Exception as exc:
            log.warning("generation for %s failed: %s", template.id, exc)
            return None

    if concurrency > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as executor:
            results = list(executor.map(_one, jobs))
    else:
        results = [_one(job) for job in jobs]
    records = [r for r in results if r is not None]
    histogram = Counter(r.constraint.drug for r in records if r.constraint)
    if histogram:
        log.info("constraint drug frequencies: %s",
                 dict(histogram.most_common()))
    return records


# ---------------------------------------------------------------------------
# Assembly

MODES = ("Tr.", "Tr.+Aug.", "Tr. Fil.", "Tr.+Aug. Fil.", "Tr. Fil.+Aug. Fil.")


def _norm_sentence(text: str) -> str:
    return " ".join(text.split()).lower()


def assemble_augmented(train, synthesized, mode: str,
                       train_keep: set[str] | None = None,
                       aug_keep: set[str] | None = None) -> Dataset:
    """Combine training and synthesized instances per the named data setting.

    Synthesized sentences duplicating a training sentence, or an earlier
    synthesized one, are dropped. Filtered modes require the matching
    retained-id sets.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    filter_train = "Tr. Fil." in mode
    use_aug = "Aug." in mode
    filter_aug = "Aug. Fil." in mode
    if filter_train and train_keep is None:
        raise ValueError(f"mode {mode!r} needs a train retained-id set")
    if filter_aug and aug_keep is None:
        raise ValueError(f"mode {mode!r} needs an augment retained-id set")

    out = [inst for inst in train
           if not filter_train or inst.id in train_keep]
    if use_aug:
        seen = {_norm_sentence(inst.text) for inst in train}
        for record in synthesized:
            inst = record.instance if isinstance(record, SynthesizedInstance) \
                else record
            if filter_aug and inst.id not in aug_keep:
                continue
            key = _norm_sentence(inst.text)
            if key in seen:
                continue
            seen.add(key)
            if not inst.id.startswith("syn-"):
                inst = Instance(id=f"syn-{inst.id}", text=inst.text,
                                events=inst.events, origin=inst.origin)
            out.append(inst)
    return Dataset(instances=tuple(out))


# ---------------------------------------------------------------------------
# File formats


def write_synthesized(records, dataset_path, provenance_path) -> None:
    with open(dataset_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(instance_to_json(record.instance),
                                ensure_ascii=False, sort_keys=True) + "\n")
    with open(provenance_path, "w", encoding="utf-8") as fh:
        for record in records:
            obj = {"id": record.instance.id,
                   "template_id": record.template_id,
                   "constraint": None if record.constraint is None else {
                       "drug": record.constraint.drug,
                       "effect": record.constraint.effect,
                       "source_instance_id": record.constraint.source_instance_id,
                   },
                   "constraint_satisfied": record.constraint_satisfied,
                   "parse_clean": record.parse_clean}
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def load_provenance(path) -> dict[str, dict]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out[obj["id"]] = obj
    return out
