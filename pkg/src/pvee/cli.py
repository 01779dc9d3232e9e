"""Command-line surface wiring the modules into reproducible runs.

Every subcommand writes its resolved configuration (flags merged with the
optional JSON config file, credentials excluded) next to its outputs, so a
run can be replayed byte-for-byte. Endpoint and API key may also come from
the PVEE_ENDPOINT / PVEE_API_KEY environment variables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from types import SimpleNamespace

from . import __version__
from .corpus import (
    Dataset,
    convert_phee_file,
    load_dataset,
    load_splits,
    make_folds,
    make_splits,
    revise_subject_disorder,
    write_dataset,
    write_fold_plan,
    write_splits,
)
from .filtering import (
    augment_filter,
    compute_stats,
    load_scores,
    train_filter,
    write_stats,
)
from .llm_client import (
    ExtractionConfig,
    LlmClient,
    ResponseCache,
    load_predictions,
    run_extraction,
    write_predictions,
)
from .metrics import (
    aggregate_folds,
    em_f1,
    event_type_f1,
    f_test_variance,
    format_table,
    load_report_flat,
    token_f1,
    trigger_em_f1,
    write_report,
)
from .prompting import DEFAULT_MODEL, PromptStrategy, build_finetune_input
from .retrieval import load_embeddings, load_trees, select_demonstrations
from .schema import linearize
from .synthesis import MODES, assemble_augmented, run_synthesis, write_synthesized


class CliError(Exception):
    pass


_SUPPRESS = argparse.SUPPRESS

# Per-command option defaults; argparse suppresses unset flags so a config
# file can fill them in. Required names must arrive from flags or config.
_DEFAULTS: dict[str, dict] = {
    "prepare-data": {"release_format": False, "seed": 0,
                     "ratios": [0.6, 0.2, 0.2], "folds": 5, "no_revise": False},
    "retrieve-demos": {"query_split": "test", "pool_split": "train",
                       "select": "bm25", "k": 5, "seed": 0,
                       "embeddings": None, "trees": None,
                       "tree_manifest": None, "splits": None},
    "extract": {"split": "test", "pool_split": "train", "strategy": "schema",
                "shots": 0, "select": "bm25", "seed": 0,
                "model": DEFAULT_MODEL, "budget_tokens": 4096,
                "concurrency": 4, "cache_dir": None, "cache_only": False,
                "endpoint": None, "api_key": None, "embeddings": None,
                "trees": None, "tree_manifest": None, "splits": None},
    "synthesize": {"split": "train", "seed": 0, "model": DEFAULT_MODEL,
                   "concurrency": 4, "cache_dir": None, "cache_only": False,
                   "endpoint": None, "api_key": None, "splits": None},
    "filter": {"synthesized": None, "train_scores": None, "aug_scores": None,
               "validation_scores": None, "shared_stats": False},
    "evaluate": {"average": "micro", "triggers": False},
    "report": {"compare_a": [], "compare_b": [], "metric": "em_overall_f1"},
    "export-pairs": {"split": "train", "splits": None, "no_trigger": False},
}

_REQUIRED: dict[str, set] = {
    "prepare-data": {"input", "output_dir"},
    "retrieve-demos": {"dataset", "output_dir"},
    "extract": {"dataset", "output_dir"},
    "synthesize": {"dataset", "output_dir"},
    "filter": {"mode", "train", "output_dir"},
    "evaluate": {"predictions", "gold", "output_dir"},
    "report": {"run_dirs", "output_dir"},
    "export-pairs": {"dataset", "output_dir"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvee",
        description="Pharmacovigilance event extraction pipeline toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"pvee {__version__}")
    parser.add_argument("--config", default=None,
                        help="JSON file providing defaults for any flag")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("prepare-data",
                       help="ingest, revise, split, and cut folds")
    p.add_argument("--input", default=_SUPPRESS, help="dataset file (JSONL)")
    p.add_argument("--release-format", action="store_true", default=_SUPPRESS,
                   help="input uses the upstream release layout")
    p.add_argument("--seed", type=int, default=_SUPPRESS)
    p.add_argument("--ratios", type=float, nargs=3, default=_SUPPRESS,
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--folds", type=int, default=_SUPPRESS,
                   help="fold count; 0 skips the fold plan")
    p.add_argument("--no-revise", action="store_true", default=_SUPPRESS,
                   help="skip the subject.disorder revision pass")
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("retrieve-demos",
                       help="write per-instance demonstration lists")
    p.add_argument("--dataset", default=_SUPPRESS)
    p.add_argument("--splits", default=_SUPPRESS)
    p.add_argument("--query-split", default=_SUPPRESS)
    p.add_argument("--pool-split", default=_SUPPRESS)
    p.add_argument("--select", default=_SUPPRESS,
                   choices=["random", "bm25", "treekernel", "dense"])
    p.add_argument("--k", type=int, default=_SUPPRESS)
    p.add_argument("--seed", type=int, default=_SUPPRESS)
    p.add_argument("--embeddings", default=_SUPPRESS)
    p.add_argument("--trees", default=_SUPPRESS)
    p.add_argument("--tree-manifest", default=_SUPPRESS)
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("extract", help="run extraction over a split")
    p.add_argument("--dataset", default=_SUPPRESS)
    p.add_argument("--splits", default=_SUPPRESS)
    p.add_argument("--split", default=_SUPPRESS)
    p.add_argument("--pool-split", default=_SUPPRESS)
    p.add_argument("--strategy", default=_SUPPRESS,
                   choices=[s.value for s in PromptStrategy])
    p.add_argument("--shots", type=int, default=_SUPPRESS)
    p.add_argument("--select", default=_SUPPRESS,
                   choices=["random", "bm25", "treekernel", "dense"])
    p.add_argument("--seed", type=int, default=_SUPPRESS)
    p.add_argument("--model", default=_SUPPRESS)
    p.add_argument("--budget-tokens", type=int, default=_SUPPRESS)
    p.add_argument("--concurrency", type=int, default=_SUPPRESS)
    p.add_argument("--cache-dir", default=_SUPPRESS)
    p.add_argument("--cache-only", action="store_true", default=_SUPPRESS,
                   help="serve from cache; any miss is an error")
    p.add_argument("--endpoint", default=_SUPPRESS)
    p.add_argument("--api-key", default=_SUPPRESS)
    p.add_argument("--embeddings", default=_SUPPRESS)
    p.add_argument("--trees", default=_SUPPRESS)
    p.add_argument("--tree-manifest", default=_SUPPRESS)
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("synthesize",
                       help="generate synthetic instances from templates")
    p.add_argument("--dataset", default=_SUPPRESS)
    p.add_argument("--splits", default=_SUPPRESS)
    p.add_argument("--split", default=_SUPPRESS)
    p.add_argument("--seed", type=int, default=_SUPPRESS)
    p.add_argument("--model", default=_SUPPRESS)
    p.add_argument("--concurrency", type=int, default=_SUPPRESS)
    p.add_argument("--cache-dir", default=_SUPPRESS)
    p.add_argument("--cache-only", action="store_true", default=_SUPPRESS)
    p.add_argument("--endpoint", default=_SUPPRESS)
    p.add_argument("--api-key", default=_SUPPRESS)
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("filter",
                       help="apply score filters and assemble a data setting")
    p.add_argument("--mode", default=_SUPPRESS, choices=list(MODES))
    p.add_argument("--train", default=_SUPPRESS,
                   help="training split dataset file")
    p.add_argument("--synthesized", default=_SUPPRESS,
                   help="synthesized dataset file")
    p.add_argument("--train-scores", default=_SUPPRESS)
    p.add_argument("--aug-scores", default=_SUPPRESS)
    p.add_argument("--validation-scores", default=_SUPPRESS)
    p.add_argument("--shared-stats", action="store_true", default=_SUPPRESS)
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--predictions", default=_SUPPRESS)
    p.add_argument("--gold", default=_SUPPRESS, help="gold dataset file")
    p.add_argument("--average", default=_SUPPRESS, choices=["micro", "macro"])
    p.add_argument("--triggers", action="store_true", default=_SUPPRESS,
                   help="also score triggers and event types")
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("report",
                       help="aggregate evaluation runs; optional F-test")
    p.add_argument("run_dirs", nargs="*", default=_SUPPRESS,
                   help="directories written by evaluate")
    p.add_argument("--compare-a", action="append", default=_SUPPRESS,
                   metavar="DIR")
    p.add_argument("--compare-b", action="append", default=_SUPPRESS,
                   metavar="DIR")
    p.add_argument("--metric", default=_SUPPRESS,
                   help="flattened metric name, e.g. em_overall_f1")
    p.add_argument("--output-dir", default=_SUPPRESS)

    p = sub.add_parser("export-pairs",
                       help="write linearized training pairs for a scorer")
    p.add_argument("--dataset", default=_SUPPRESS)
    p.add_argument("--splits", default=_SUPPRESS)
    p.add_argument("--split", default=_SUPPRESS)
    p.add_argument("--no-trigger", action="store_true", default=_SUPPRESS,
                   help="leave triggers out of the linearized targets")
    p.add_argument("--output-dir", default=_SUPPRESS)
    return parser


def _resolve(command: str, args: argparse.Namespace) -> SimpleNamespace:
    """Merge defaults, config-file values, and flags; check required names."""
    merged = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            config = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"config: cannot read {config_path}: {exc}")
        if not isinstance(config, dict):
            raise CliError("config: top level must be an object")
        known = set(_DEFAULTS[command]) | _REQUIRED[command]
        for key, value in config.items():
            field = key.replace("-", "_")
            if field not in known:
                raise CliError(f"config.{key}: unknown key for {command}")
            merged[field] = value
    for key, value in vars(args).items():
        if key not in ("command", "config"):
            merged[key] = value
    missing = sorted(k for k in _REQUIRED[command]
                     if merged.get(k) in (None, [], ""))
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise CliError(f"{command}: missing required option(s): {flags}")
    return SimpleNamespace(**merged)


def _write_meta(output_dir: Path, command: str, ns: SimpleNamespace) -> None:
    # api_key is a credential; output_dir would make otherwise identical
    # runs into different directories compare unequal.
    resolved = {k: v for k, v in vars(ns).items()
                if k not in ("api_key", "output_dir")}
    obj = {"command": command, "version": __version__, "config": resolved}
    (output_dir / "resolved_config.json").write_text(
        json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


def _out_dir(ns: SimpleNamespace) -> Path:
    path = Path(ns.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _split_instances(dataset: Dataset, splits_path, split: str | None):
    """Instances of one split, or all of them when no split file is given."""
    if splits_path is None:
        return list(dataset.instances)
    labels = load_splits(splits_path)
    unknown = sorted(set(labels) - set(dataset.ids()))
    if unknown:
        raise CliError(f"splits file names unknown ids: {unknown[:3]}")
    return [inst for inst in dataset.instances
            if labels.get(inst.id) == split]


def _client(ns: SimpleNamespace) -> LlmClient:
    endpoint = ns.endpoint or os.environ.get("PVEE_ENDPOINT")
    api_key = ns.api_key or os.environ.get("PVEE_API_KEY")
    cache = ResponseCache(ns.cache_dir) if ns.cache_dir else None
    return LlmClient(endpoint=endpoint, api_key=api_key, cache=cache,
                     cache_only=ns.cache_only)


def _retrieval_extras(ns: SimpleNamespace) -> dict:
    extras = {}
    if getattr(ns, "embeddings", None):
        extras["embeddings"] = load_embeddings(ns.embeddings)
    if getattr(ns, "trees", None):
        extras["trees"] = load_trees(ns.trees,
                                     getattr(ns, "tree_manifest", None))
    return extras


# ---------------------------------------------------------------------------
# Handlers


def _cmd_prepare_data(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    if ns.release_format:
        instances = convert_phee_file(ns.input)
        dataset = Dataset(instances=tuple(instances))
    else:
        dataset = load_dataset(ns.input)
    revised = 0
    if not ns.no_revise:
        dataset, revised = revise_subject_disorder(dataset)
    dataset = make_splits(dataset, ratios=tuple(ns.ratios), seed=ns.seed)
    write_dataset(dataset.instances, out / "dataset.jsonl")
    write_splits(dataset.splits, out / "splits.json")
    if ns.folds >= 2:
        plan = make_folds(dataset, n_folds=ns.folds, seed=ns.seed)
        write_fold_plan(plan, out / "folds.json")
    _write_meta(out, "prepare-data", ns)
    counts = {name: sum(1 for s in dataset.splits.values() if s == name)
              for name in ("train", "validation", "test")}
    print(f"prepared {len(dataset.instances)} instances "
          f"(train {counts['train']}, validation {counts['validation']}, "
          f"test {counts['test']}); revision added {revised} argument(s)")
    return 0


def _cmd_retrieve_demos(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    dataset = load_dataset(ns.dataset)
    queries = _split_instances(dataset, ns.splits, ns.query_split)
    pool = _split_instances(dataset, ns.splits, ns.pool_split)
    extras = _retrieval_extras(ns)
    with open(out / "demos.jsonl", "w", encoding="utf-8") as fh:
        for query in sorted(queries, key=lambda i: i.id):
            selected = select_demonstrations(ns.select, query, pool, ns.k,
                                             ns.seed, **extras)
            obj = {"id": query.id,
                   "demonstrations": {et.value: [inst.id for inst in ranked]
                                      for et, ranked in selected.items()}}
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
    _write_meta(out, "retrieve-demos", ns)
    print(f"wrote demonstrations for {len(queries)} queries")
    return 0


def _cmd_extract(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    dataset = load_dataset(ns.dataset)
    targets = _split_instances(dataset, ns.splits, ns.split)
    if not targets:
        raise CliError(f"no instances in split {ns.split!r}")
    pool = _split_instances(dataset, ns.splits, ns.pool_split) \
        if ns.shots > 0 else []
    extras = _retrieval_extras(ns)
    config = ExtractionConfig(strategy=PromptStrategy(ns.strategy),
                              shots=ns.shots, select=ns.select,
                              model=ns.model, seed=ns.seed,
                              budget_tokens=ns.budget_tokens,
                              concurrency=ns.concurrency)
    records = run_extraction(targets, _client(ns), config, pool=pool,
                             embeddings=extras.get("embeddings"),
                             trees=extras.get("trees"))
    write_predictions(records, out / "predictions.jsonl")
    _write_meta(out, "extract", ns)
    failed = [r["id"] for r in records if "error" in r]
    print(f"extracted {len(records)} instances ({len(failed)} failed)")
    if failed:
        print(f"failed ids: {failed[:5]}", file=sys.stderr)
        return 1
    return 0


def _cmd_synthesize(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    dataset = load_dataset(ns.dataset)
    templates = _split_instances(dataset, ns.splits, ns.split)
    if not templates:
        raise CliError(f"no instances in split {ns.split!r}")
    records = run_synthesis(templates, _client(ns), seed=ns.seed,
                            model=ns.model, concurrency=ns.concurrency)
    write_synthesized(records, out / "synthesized.jsonl",
                      out / "provenance.jsonl")
    _write_meta(out, "synthesize", ns)
    satisfied = sum(1 for r in records if r.constraint_satisfied)
    print(f"synthesized {len(records)} instances from {len(templates)} "
          f"templates ({satisfied} satisfied their constraint)")
    return 0


def _cmd_filter(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    train_ds = load_dataset(ns.train)
    synthesized = load_dataset(ns.synthesized).instances \
        if ns.synthesized else ()
    if "Aug." in ns.mode and not synthesized:
        raise CliError(f"mode {ns.mode!r} needs --synthesized")
    train_keep = aug_keep = None
    if "Tr. Fil." in ns.mode:
        if not ns.train_scores:
            raise CliError(f"mode {ns.mode!r} needs --train-scores")
        scores = load_scores(ns.train_scores)
        train_keep = train_filter(scores)
        audit = {"n_scored": len(scores), "n_retained": len(train_keep),
                 "retained": sorted(train_keep)}
        (out / "train_filter_audit.json").write_text(
            json.dumps(audit, ensure_ascii=False, sort_keys=True, indent=2)
            + "\n", encoding="utf-8")
    if "Aug. Fil." in ns.mode:
        if not ns.aug_scores or not ns.validation_scores:
            raise CliError(
                f"mode {ns.mode!r} needs --aug-scores and --validation-scores")
        stats = compute_stats(load_scores(ns.validation_scores))
        write_stats(stats, out / "validation_stats.json")
        scores = load_scores(ns.aug_scores)
        aug_keep = augment_filter(scores, stats, shared_stats=ns.shared_stats)
        audit = {"n_scored": len(scores), "n_retained": len(aug_keep),
                 "retained": sorted(aug_keep)}
        (out / "aug_filter_audit.json").write_text(
            json.dumps(audit, ensure_ascii=False, sort_keys=True, indent=2)
            + "\n", encoding="utf-8")
    assembled = assemble_augmented(train_ds.instances, synthesized, ns.mode,
                                   train_keep=train_keep, aug_keep=aug_keep)
    write_dataset(assembled.instances, out / "assembled.jsonl")
    _write_meta(out, "filter", ns)
    print(f"assembled {len(assembled.instances)} instances under {ns.mode!r}")
    return 0


def _cmd_evaluate(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    predictions = load_predictions(ns.predictions)
    by_id = load_dataset(ns.gold).by_id()
    missing = sorted(set(predictions) - set(by_id))
    if missing:
        raise CliError(f"predictions reference unknown gold ids: {missing[:3]}")
    golds = {rid: list(by_id[rid].events) for rid in predictions}
    em = em_f1(predictions, golds, average=ns.average)
    token = token_f1(predictions, golds, average=ns.average)
    write_report(em, out / "em_report.json")
    write_report(token, out / "token_report.json")
    (out / "report.txt").write_text(format_table(em, token), encoding="utf-8")
    if ns.triggers:
        write_report(trigger_em_f1(predictions, golds),
                     out / "trigger_report.json")
        write_report(event_type_f1(predictions, golds),
                     out / "event_type_report.json")
    _write_meta(out, "evaluate", ns)
    print(f"EM_F1 {em.overall.f1:.4f}  Token_F1 {token.overall.f1:.4f} "
          f"({len(predictions)} instances)")
    return 0


def _run_flat(run_dir: str) -> dict[str, float]:
    directory = Path(run_dir)
    flat = {}
    for prefix, name in (("em", "em_report.json"),
                         ("token", "token_report.json")):
        path = directory / name
        if not path.exists():
            raise CliError(f"{run_dir}: missing {name}")
        for key, value in load_report_flat(path).items():
            flat[f"{prefix}_{key}"] = value
    return flat


def _cmd_report(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    flats = [_run_flat(d) for d in ns.run_dirs]
    summary = aggregate_folds(flats)
    result = summary.to_json()
    lines = [f"{name}  {mean * 100:.2f} ±{std * 100:.2f}"
             for name, (mean, std) in sorted(summary.metrics.items())]
    if ns.compare_a and ns.compare_b:
        sample_a = [_run_flat(d).get(ns.metric) for d in ns.compare_a]
        sample_b = [_run_flat(d).get(ns.metric) for d in ns.compare_b]
        if None in sample_a or None in sample_b:
            raise CliError(f"metric {ns.metric!r} missing from a compared run")
        f_value, p_value = f_test_variance(sample_a, sample_b)
        result["f_test"] = {"metric": ns.metric, "F": f_value, "p": p_value,
                            "n_a": len(sample_a), "n_b": len(sample_b)}
        lines.append(f"F-test on {ns.metric}: F={f_value:.4f} p={p_value:.4f}")
    (out / "summary.json").write_text(
        json.dumps(result, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_meta(out, "report", ns)
    print(f"aggregated {summary.n_runs} runs into {out / 'summary.txt'}")
    return 0


def _cmd_export_pairs(ns: SimpleNamespace) -> int:
    out = _out_dir(ns)
    dataset = load_dataset(ns.dataset)
    instances = _split_instances(dataset, ns.splits, ns.split)
    if not instances:
        raise CliError(f"no instances in split {ns.split!r}")
    with open(out / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for inst in sorted(instances, key=lambda i: i.id):
            obj = {"id": inst.id, "text": inst.text,
                   "input": build_finetune_input(inst.text),
                   "target": linearize(inst.events,
                                       include_trigger=not ns.no_trigger)}
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
    _write_meta(out, "export-pairs", ns)
    print(f"exported {len(instances)} pairs")
    return 0


_HANDLERS = {
    "prepare-data": _cmd_prepare_data,
    "retrieve-demos": _cmd_retrieve_demos,
    "extract": _cmd_extract,
    "synthesize": _cmd_synthesize,
    "filter": _cmd_filter,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "export-pairs": _cmd_export_pairs,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        ns = _resolve(args.command, args)
        return _HANDLERS[args.command](ns)
    except CliError as exc:
        print(f"pvee {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"pvee {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
