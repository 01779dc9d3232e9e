"""Evaluation: EM_F1, Token_F1, trigger and event-type F1, fold aggregation,
and a two-sided variance F-test.

Matching works on (event_type, kind, normalized text) tuples with multiset
semantics, micro-averaged over the corpus. Offsets are ignored so grounded
and offset-free predictions share one scorer. A macro switch averages
per-instance scores instead.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field

from .retrieval import tokenize
from .schema import KIND_ORDER, MAIN_KINDS, SUB_KINDS


class KeyMismatch(Exception):
    pass


class MissingTriggers(Exception):
    """Predictions without triggers; chat extractions never produce them."""


class TooFewRuns(Exception):
    pass


class DegenerateVariance(Exception):
    pass


@dataclass(frozen=True)
class Prf:
    precision: float
    recall: float
    f1: float
    matched: float = 0.0
    n_pred: float = 0.0
    n_gold: float = 0.0

    @classmethod
    def from_counts(cls, matched, n_pred, n_gold) -> "Prf":
        p = matched / n_pred if n_pred else 0.0
        r = matched / n_gold if n_gold else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        return cls(precision=p, recall=r, f1=f1, matched=matched,
                   n_pred=n_pred, n_gold=n_gold)


@dataclass(frozen=True)
class EvalReport:
    level: str
    overall: Prf
    groups: dict[str, Prf] = field(default_factory=dict)
    kinds: dict[str, Prf] = field(default_factory=dict)

    def flat(self) -> dict[str, float]:
        out = {}
        for name, prf in [("overall", self.overall), *self.groups.items(),
                          *self.kinds.items()]:
            out[f"{name}_precision"] = prf.precision
            out[f"{name}_recall"] = prf.recall
            out[f"{name}_f1"] = prf.f1
        return out

    def to_json(self) -> dict:
        def prf_obj(prf: Prf) -> dict:
            return {"precision": prf.precision, "recall": prf.recall,
                    "f1": prf.f1, "matched": prf.matched,
                    "n_pred": prf.n_pred, "n_gold": prf.n_gold}

        return {"level": self.level, "overall": prf_obj(self.overall),
                "groups": {k: prf_obj(v) for k, v in self.groups.items()},
                "kinds": {k: prf_obj(v) for k, v in self.kinds.items()}}


@dataclass(frozen=True)
class FoldSummary:
    n_runs: int
    metrics: dict[str, tuple[float, float]]  # name -> (mean, sample std)

    def to_json(self) -> dict:
        return {"n_runs": self.n_runs,
                "metrics": {k: {"mean": m, "std": s}
                            for k, (m, s) in self.metrics.items()}}


def _norm_text(text: str) -> str:
    return " ".join(text.split())


def _flatten_arguments(events) -> list[tuple[str, str, str]]:
    tuples = []
    for ev in events:
        for arg in ev.arguments:
            text = _norm_text(arg.span.text)
            if text:
                tuples.append((ev.event_type.value, arg.kind, text))
            for sub in arg.sub_arguments:
                sub_text = _norm_text(sub.span.text)
                if sub_text:
                    tuples.append((ev.event_type.value, sub.kind, sub_text))
    return tuples


def _check_keys(predictions, golds) -> list[str]:
    if set(predictions) != set(golds):
        only_p = sorted(set(predictions) - set(golds))[:3]
        only_g = sorted(set(golds) - set(predictions))[:3]
        raise KeyMismatch(
            f"prediction/gold id sets differ (pred-only {only_p}, "
            f"gold-only {only_g})")
    return sorted(golds)


class _Tally:
    __slots__ = ("matched", "n_pred", "n_gold")

    def __init__(self):
        self.matched = 0.0
        self.n_pred = 0.0
        self.n_gold = 0.0

    def add(self, matched, n_pred, n_gold):
        self.matched += matched
        self.n_pred += n_pred
        self.n_gold += n_gold

    def prf(self) -> Prf:
        return Prf.from_counts(self.matched, self.n_pred, self.n_gold)


def _build_report(level: str, per_kind: dict[str, _Tally],
                  per_instance: list[Prf] | None = None) -> EvalReport:
    groups = {"main": _Tally(), "sub": _Tally()}
    overall = _Tally()
    for kind, tally in per_kind.items():
        group = "main" if kind in MAIN_KINDS else "sub"
        groups[group].add(tally.matched, tally.n_pred, tally.n_gold)
        overall.add(tally.matched, tally.n_pred, tally.n_gold)
    if per_instance is not None:  # macro: replace the overall micro average
        n = len(per_instance)
        overall_prf = Prf(
            precision=sum(p.precision for p in per_instance) / n if n else 0.0,
            recall=sum(p.recall for p in per_instance) / n if n else 0.0,
            f1=sum(p.f1 for p in per_instance) / n if n else 0.0)
    else:
        overall_prf = overall.prf()
    kinds = {k: per_kind[k].prf() for k in KIND_ORDER if k in per_kind}
    return EvalReport(level=level, overall=overall_prf,
                      groups={k: v.prf() for k, v in groups.items()},
                      kinds=kinds)


def em_f1(predictions, golds, average: str = "micro") -> EvalReport:
    """Exact matching over (event_type, kind, normalized text) multisets."""
    if average not in ("micro", "macro"):
        raise ValueError(f"unknown average {average!r}")
    ids = _check_keys(predictions, golds)
    per_kind: dict[str, _Tally] = {}
    per_instance: list[Prf] = []
    for rid in ids:
        pred = Counter(_flatten_arguments(predictions[rid]))
        gold = Counter(_flatten_arguments(golds[rid]))
        inst_matched = 0
        for key in set(pred) | set(gold):
            matched = min(pred[key], gold[key])
            inst_matched += matched
            tally = per_kind.setdefault(key[1], _Tally())
            tally.add(matched, pred[key], gold[key])
        per_instance.append(Prf.from_counts(inst_matched,
                                            sum(pred.values()),
                                            sum(gold.values())))
    return _build_report("em", per_kind,
                         per_instance if average == "macro" else None)


def token_f1(predictions, golds, average: str = "micro") -> EvalReport:
    """Token overlap, pooling span tokens per (instance, event type, kind)."""
    if average not in ("micro", "macro"):
        raise ValueError(f"unknown average {average!r}")
    ids = _check_keys(predictions, golds)
    per_kind: dict[str, _Tally] = {}
    per_instance: list[Prf] = []

    def pools(events) -> dict[tuple[str, str], Counter]:
        out: dict[tuple[str, str], Counter] = {}
        for et, kind, text in _flatten_arguments(events):
            out.setdefault((et, kind), Counter()).update(tokenize(text))
        return out

    for rid in ids:
        pred = pools(predictions[rid])
        gold = pools(golds[rid])
        inst = _Tally()
        for key in set(pred) | set(gold):
            p_tokens = pred.get(key, Counter())
            g_tokens = gold.get(key, Counter())
            matched = sum((p_tokens & g_tokens).values())
            tally = per_kind.setdefault(key[1], _Tally())
            tally.add(matched, sum(p_tokens.values()), sum(g_tokens.values()))
            inst.add(matched, sum(p_tokens.values()), sum(g_tokens.values()))
        per_instance.append(inst.prf())
    return _build_report("token", per_kind,
                         per_instance if average == "macro" else None)


def trigger_em_f1(predictions, golds) -> EvalReport:
    """Exact matching over (event_type, trigger text) tuples."""
    ids = _check_keys(predictions, golds)
    for rid in ids:
        for ev in predictions[rid]:
            if ev.trigger is None:
                raise MissingTriggers(
                    f"prediction for {rid!r} has an event without a trigger")
    overall = _Tally()
    for rid in ids:
        pred = Counter((ev.event_type.value, _norm_text(ev.trigger.text))
                       for ev in predictions[rid])
        gold = Counter((ev.event_type.value, _norm_text(ev.trigger.text))
                       for ev in golds[rid] if ev.trigger is not None)
        overall.add(sum((pred & gold).values()),
                    sum(pred.values()), sum(gold.values()))
    return EvalReport(level="trigger_em", overall=overall.prf())


def event_type_f1(predictions, golds) -> EvalReport:
    ids = _check_keys(predictions, golds)
    overall = _Tally()
    for rid in ids:
        pred = Counter(ev.event_type.value for ev in predictions[rid])
        gold = Counter(ev.event_type.value for ev in golds[rid])
        overall.add(sum((pred & gold).values()),
                    sum(pred.values()), sum(gold.values()))
    return EvalReport(level="event_type", overall=overall.prf())


def aggregate_folds(reports) -> FoldSummary:
    """Per-metric mean and sample standard deviation across fold runs.

    Accepts EvalReports or already-flat metric dicts; only metrics present
    in every run are summarized.
    """
    flats = [r.flat() if isinstance(r, EvalReport) else dict(r)
             for r in reports]
    if len(flats) < 2:
        raise TooFewRuns(f"need at least 2 runs, got {len(flats)}")
    keys = set(flats[0])
    for f in flats[1:]:
        keys &= set(f)
    metrics = {}
    for key in sorted(keys):
        values = [f[key] for f in flats]
        metrics[key] = (statistics.fmean(values), statistics.stdev(values))
    return FoldSummary(n_runs=len(flats), metrics=metrics)


# ---------------------------------------------------------------------------
# Variance F-test


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz's continued fraction for the incomplete beta function.
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f_value: float, d1: int, d2: int) -> float:
    """Survival function of the F distribution with (d1, d2) dof."""
    if f_value <= 0.0:
        return 1.0
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f_value))


def f_test_variance(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided F-test on sample variances.

    F is the larger sample variance over the smaller, degrees of freedom
    (n-1, n-1) with the numerator sample first. Equal variances give
    exactly (1.0, 1.0).
    """
    a, b = list(sample_a), list(sample_b)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateVariance("both samples need at least 2 values")
    var_a, var_b = statistics.variance(a), statistics.variance(b)
    if var_a == 0 or var_b == 0:
        raise DegenerateVariance("a sample has zero variance")
    if var_a >= var_b:
        f_value, d1, d2 = var_a / var_b, len(a) - 1, len(b) - 1
    else:
        f_value, d1, d2 = var_b / var_a, len(b) - 1, len(a) - 1
    if f_value == 1.0:
        return 1.0, 1.0
    sf = f_sf(f_value, d1, d2)
    p = 2.0 * min(sf, 1.0 - sf)
    return f_value, min(max(p, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Report rendering


def _pct(value: float) -> str:
    return f"{value * 100:.2f}"


def format_table(em: EvalReport, token: EvalReport) -> str:
    """Text table with main/sub argument rows and EM/Token F1 columns."""
    rows = [("Argument", "EM_P", "EM_R", "EM_F1",
             "Tok_P", "Tok_R", "Tok_F1")]

    def add(name: str, e: Prf | None, t: Prf | None):
        blank = ("-",) * 3
        e_cols = ((_pct(e.precision), _pct(e.recall), _pct(e.f1))
                  if e else blank)
        t_cols = ((_pct(t.precision), _pct(t.recall), _pct(t.f1))
                  if t else blank)
        rows.append((name, *e_cols, *t_cols))

    main_kinds = [k for k in KIND_ORDER if k in MAIN_KINDS]
    sub_kinds = [k for k in KIND_ORDER if k in SUB_KINDS]
    sections = [("Main-arguments", main_kinds, "main"),
                ("Sub-arguments", sub_kinds, "sub")]
    lines = []
    for title, kinds, group in sections:
        rows.append((title, "", "", "", "", "", ""))
        for kind in kinds:
            if kind in em.kinds or kind in token.kinds:
                add("  " + kind, em.kinds.get(kind), token.kinds.get(kind))
        add("  all " + group, em.groups.get(group), token.groups.get(group))
    add("Overall", em.overall, token.overall)

    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths))
                     .rstrip())
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, ensure_ascii=False, sort_keys=True,
                  indent=2)
        fh.write("\n")


def load_report_flat(path) -> dict[str, float]:
    """Flatten a stored report back to the metric dict aggregate_folds takes."""
    obj = json.loads(open(path, encoding="utf-8").read())
    out = {}
    for name, prf in [("overall", obj["overall"]),
                      *obj.get("groups", {}).items(),
                      *obj.get("kinds", {}).items()]:
        out[f"{name}_precision"] = prf["precision"]
        out[f"{name}_recall"] = prf["recall"]
        out[f"{name}_f1"] = prf["f1"]
    return out
