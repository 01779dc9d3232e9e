"""Train Filter and Augment Filter over sequence-probability scores.

Scores come from a fine-tuned scorer as average token probabilities of
linearized annotation sequences: s_gold for the reference sequence, s_pred
for the model's own prediction. The train filter keeps instances scoring at
or above the training mean; the augment filter drops synthesized instances
whose gold z-score is negative or below the prediction z-score, both
normalized with validation statistics.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path


class EmptyInput(Exception):
    pass


class DegenerateStd(Exception):
    pass


class MissingPrediction(Exception):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    instance_id: str
    s_gold: float
    s_pred: float | None = None
    split: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.s_gold <= 1.0:
            raise ValueError(f"s_gold {self.s_gold} outside [0, 1]")
        if self.s_pred is not None and not 0.0 <= self.s_pred <= 1.0:
            raise ValueError(f"s_pred {self.s_pred} outside [0, 1]")


@dataclass(frozen=True)
class ScoreStats:
    gold_mean: float
    gold_std: float
    pred_mean: float | None
    pred_std: float | None
    n: int
    variance_convention: str = "population"


def compute_stats(records) -> ScoreStats:
    records = list(records)
    if len(records) < 2:
        raise EmptyInput(f"need at least 2 records, got {len(records)}")
    gold = [r.s_gold for r in records]
    preds = [r.s_pred for r in records if r.s_pred is not None]
    pred_mean = pred_std = None
    if len(preds) >= 2:
        pred_mean = statistics.fmean(preds)
        pred_std = statistics.pstdev(preds)
    return ScoreStats(gold_mean=statistics.fmean(gold),
                      gold_std=statistics.pstdev(gold),
                      pred_mean=pred_mean, pred_std=pred_std,
                      n=len(records))


def train_filter(records) -> set[str]:
    """Ids with s_gold at or above the mean; the boundary case stays."""
    records = list(records)
    if not records:
        raise EmptyInput("no score records")
    mean = statistics.fmean(r.s_gold for r in records)
    return {r.instance_id for r in records if r.s_gold >= mean}


def zscore(value: float, mean: float, std: float) -> float:
    if std == 0:
        raise DegenerateStd("standard deviation is zero")
    return (value - mean) / std


def augment_filter(aug_records, validation_stats: ScoreStats,
                   shared_stats: bool = False) -> set[str]:
    """Drop a record iff z_gold < 0 or z_gold < z_pred.

    z_gold normalizes with validation gold statistics. z_pred normalizes
    with validation prediction statistics, or with the gold statistics when
    shared_stats is set (the alternative reading of one shared reference).
    """
    if shared_stats:
        pred_mean, pred_std = validation_stats.gold_mean, validation_stats.gold_std
    else:
        if validation_stats.pred_mean is None or validation_stats.pred_std is None:
            raise MissingPrediction("validation statistics lack s_pred")
        pred_mean, pred_std = validation_stats.pred_mean, validation_stats.pred_std
    retained = set()
    for record in aug_records:
        if record.s_pred is None:
            raise MissingPrediction(f"record {record.instance_id!r} has no s_pred")
        z_gold = zscore(record.s_gold, validation_stats.gold_mean,
                        validation_stats.gold_std)
        z_pred = zscore(record.s_pred, pred_mean, pred_std)
        if z_gold < 0 or z_gold < z_pred:
            continue
        retained.add(record.instance_id)
    return retained


# ---------------------------------------------------------------------------
# File formats


def load_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(ScoreRecord(instance_id=obj["id"],
                                       s_gold=obj["s_gold"],
                                       s_pred=obj.get("s_pred"),
                                       split=obj.get("split", "train")))
    return records


def write_scores(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"id": r.instance_id, "s_gold": r.s_gold, "split": r.split}
            if r.s_pred is not None:
                obj["s_pred"] = r.s_pred
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def load_stats(path) -> ScoreStats:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return ScoreStats(gold_mean=obj["gold_mean"], gold_std=obj["gold_std"],
                      pred_mean=obj.get("pred_mean"),
                      pred_std=obj.get("pred_std"), n=obj["n"],
                      variance_convention=obj.get("variance_convention",
                                                  "population"))


def write_stats(stats: ScoreStats, path) -> None:
    obj = {"gold_mean": stats.gold_mean, "gold_std": stats.gold_std,
           "pred_mean": stats.pred_mean, "pred_std": stats.pred_std,
           "n": stats.n, "variance_convention": stats.variance_convention}
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True,
                                     indent=2) + "\n", encoding="utf-8")
