import json
from pathlib import Path

import pytest

from conftest import MockSession
from pvee.cli import main
from pvee.corpus import (
    Dataset,
    Instance,
    event_to_json,
    load_dataset,
    load_splits,
    make_splits,
    write_dataset,
    write_splits,
)
from pvee.filtering import load_stats
from pvee.llm_client import (
    ExtractionConfig,
    LlmClient,
    ResponseCache,
    load_predictions,
    run_extraction,
    write_predictions,
)
from pvee.metrics import f_test_variance
from pvee.prompting import PromptStrategy, build_finetune_input
from pvee.schema import Argument, Event, EventType, Span, linearize
from pvee.synthesis import run_synthesis


def _mini_instance(rid, text="Aspirin caused a rash in the patient.",
                   effect="rash"):
    ev = Event(EventType.ADVERSE, trigger=Span("caused"), arguments=(
        Argument("treatment", Span("Aspirin"),
                 (Argument("drug", Span("Aspirin")),)),
        Argument("effect", Span(effect))))
    return Instance(rid, text, (ev,))


@pytest.fixture
def data_dir(tmp_path, corpus):
    """Fixture corpus + its seed-0 split labels written as CLI inputs."""
    root = tmp_path / "data"
    root.mkdir()
    write_dataset(corpus, root / "dataset.jsonl")
    split = make_splits(Dataset(tuple(corpus)), seed=0)
    write_splits(split.splits, root / "splits.json")
    return root


def _by_split(corpus, data_dir, name):
    labels = load_splits(data_dir / "splits.json")
    return [i for i in corpus if labels[i.id] == name]


def _client(mock_session, cache_dir):
    return LlmClient(endpoint="http://mock", cache=ResponseCache(cache_dir),
                     session=mock_session, sleep=lambda s: None)


# ---------------------------------------------------------------------------
# Parser plumbing


def test_no_command_shows_help(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "pvee" in capsys.readouterr().out


def test_missing_required_options(capsys):
    assert main(["prepare-data"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("pvee prepare-data:")
    assert "missing required option(s)" in err
    assert "--input" in err and "--output-dir" in err


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"bogus": 1}', encoding="utf-8")
    assert main(["--config", str(cfg), "evaluate"]) == 2
    assert "config.bogus: unknown key for evaluate" in capsys.readouterr().err


def test_config_unreadable(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "void.json"), "evaluate"]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_config_must_be_object(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[]", encoding="utf-8")
    assert main(["--config", str(cfg), "evaluate"]) == 2
    assert "top level must be an object" in capsys.readouterr().err


def test_config_fills_required_and_flags_override(tmp_path, corpus):
    root = tmp_path / "in"
    root.mkdir()
    write_dataset(corpus, root / "dataset.jsonl")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "input": str(root / "dataset.jsonl"),
        "output-dir": str(tmp_path / "from_config"),
        "folds": 0,
    }), encoding="utf-8")
    assert main(["--config", str(cfg), "prepare-data"]) == 0
    assert (tmp_path / "from_config" / "dataset.jsonl").exists()

    assert main(["--config", str(cfg), "prepare-data",
                 "--output-dir", str(tmp_path / "from_flag")]) == 0
    assert (tmp_path / "from_flag" / "dataset.jsonl").exists()


# ---------------------------------------------------------------------------
# prepare-data


def test_prepare_data_outputs(tmp_path, corpus, capsys):
    root = tmp_path / "in"
    root.mkdir()
    write_dataset(corpus, root / "dataset.jsonl")
    out = tmp_path / "out"
    assert main(["prepare-data", "--input", str(root / "dataset.jsonl"),
                 "--output-dir", str(out), "--seed", "0"]) == 0
    line = capsys.readouterr().out.strip()
    assert line == ("prepared 20 instances (train 12, validation 5, test 3); "
                    "revision added 1 argument(s)")

    prepared = load_dataset(out / "dataset.jsonl")
    assert len(prepared.instances) == 20
    labels = load_splits(out / "splits.json")
    assert sorted(labels) == sorted(i.id for i in corpus)
    assert (out / "folds.json").exists()

    meta = json.loads((out / "resolved_config.json").read_text())
    assert meta["command"] == "prepare-data"
    assert "output_dir" not in meta["config"]
    assert "api_key" not in meta["config"]
    assert meta["config"]["seed"] == 0


def test_prepare_data_no_revise_and_no_folds(tmp_path, corpus, capsys):
    root = tmp_path / "in"
    root.mkdir()
    write_dataset(corpus, root / "dataset.jsonl")
    out = tmp_path / "out"
    assert main(["prepare-data", "--input", str(root / "dataset.jsonl"),
                 "--output-dir", str(out), "--no-revise",
                 "--folds", "0"]) == 0
    assert "revision added 0 argument(s)" in capsys.readouterr().out
    assert not (out / "folds.json").exists()


def test_prepare_data_release_format(tmp_path, capsys):
    context = "A 46-year-old woman developed a rash after taking aspirin."

    def at(s):
        return context.index(s)

    rows = []
    for k in range(5):
        rows.append({
            "id": f"rel_{k}",
            "context": context,
            "annotations": [{"events": [{
                "event_id": "E1",
                "event_type": "adverse event",
                "Trigger": {"text": [["developed"]],
                            "start": [[at("developed")]]},
                "Treatment": {"text": [["aspirin"]],
                              "start": [[at("aspirin")]],
                              "Drug": {"text": [["aspirin"]],
                                       "start": [[at("aspirin")]]}},
                "Effect": {"text": [["rash"]], "start": [[at("rash")]]},
            }]}],
        })
    src = tmp_path / "release.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in rows),
                   encoding="utf-8")
    out = tmp_path / "out"
    assert main(["prepare-data", "--input", str(src), "--release-format",
                 "--folds", "0", "--output-dir", str(out)]) == 0
    assert "prepared 5 instances" in capsys.readouterr().out
    prepared = load_dataset(out / "dataset.jsonl")
    assert {i.id for i in prepared.instances} == {f"rel_{k}"
                                                  for k in range(5)}


# ---------------------------------------------------------------------------
# retrieve-demos


def test_retrieve_demos_writes_ranked_ids(data_dir, tmp_path, corpus):
    out = tmp_path / "demos"
    assert main(["retrieve-demos", "--dataset",
                 str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--select", "bm25", "--k", "2",
                 "--output-dir", str(out)]) == 0
    rows = [json.loads(l) for l in
            (out / "demos.jsonl").read_text().splitlines()]
    test_ids = sorted(i.id for i in _by_split(corpus, data_dir, "test"))
    train_ids = {i.id for i in _by_split(corpus, data_dir, "train")}
    assert [r["id"] for r in rows] == test_ids
    for row in rows:
        demos = row["demonstrations"]
        assert set(demos) == {"adverse_event", "potential_therapeutic_event"}
        for ranked in demos.values():
            assert len(ranked) == 2
            assert set(ranked) <= train_ids


# ---------------------------------------------------------------------------
# extract


def test_extract_zero_shot_from_cache(data_dir, tmp_path, corpus,
                                      mock_session, capsys):
    cache = tmp_path / "cache"
    targets = _by_split(corpus, data_dir, "test")
    records = run_extraction(targets, _client(mock_session, cache),
                             ExtractionConfig())
    expected = tmp_path / "expected.jsonl"
    write_predictions(records, expected)

    out = tmp_path / "run"
    assert main(["extract", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--cache-dir", str(cache), "--cache-only",
                 "--output-dir", str(out)]) == 0
    assert "extracted 3 instances (0 failed)" in capsys.readouterr().out
    assert (out / "predictions.jsonl").read_bytes() == expected.read_bytes()

    meta = json.loads((out / "resolved_config.json").read_text())
    assert meta["config"]["strategy"] == "schema"
    assert meta["config"]["cache_only"] is True
    assert "api_key" not in meta["config"]


def test_extract_five_shot_from_cache(data_dir, tmp_path, corpus,
                                      mock_session):
    cache = tmp_path / "cache"
    targets = _by_split(corpus, data_dir, "test")
    pool = _by_split(corpus, data_dir, "train")
    config = ExtractionConfig(strategy=PromptStrategy.SCHEMA, shots=5,
                              select="bm25")
    records = run_extraction(targets, _client(mock_session, cache), config,
                             pool=pool)
    expected = tmp_path / "expected.jsonl"
    write_predictions(records, expected)

    out = tmp_path / "run"
    assert main(["extract", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--shots", "5", "--select", "bm25",
                 "--cache-dir", str(cache), "--cache-only",
                 "--output-dir", str(out)]) == 0
    assert (out / "predictions.jsonl").read_bytes() == expected.read_bytes()


def test_extract_cold_cache_fails_instances(data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["extract", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--cache-dir", str(tmp_path / "empty"), "--cache-only",
                 "--output-dir", str(out)]) == 1
    captured = capsys.readouterr()
    assert "(3 failed)" in captured.out
    assert "failed ids:" in captured.err
    rows = [json.loads(l) for l in
            (out / "predictions.jsonl").read_text().splitlines()]
    assert all("error" in r for r in rows)


def test_extract_empty_split_is_cli_error(data_dir, tmp_path, capsys):
    assert main(["extract", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--split", "holdout",
                 "--output-dir", str(tmp_path / "run")]) == 2
    assert "no instances in split 'holdout'" in capsys.readouterr().err


def test_extract_unknown_split_ids_rejected(data_dir, tmp_path, corpus,
                                            capsys):
    labels = load_splits(data_dir / "splits.json")
    labels["ghost"] = "test"
    write_splits(labels, data_dir / "splits.json")
    assert main(["extract", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--output-dir", str(tmp_path / "run")]) == 2
    assert "unknown ids" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# synthesize


def test_synthesize_from_cache(data_dir, tmp_path, corpus, mock_session,
                               capsys):
    cache = tmp_path / "cache"
    templates = _by_split(corpus, data_dir, "train")
    run_synthesis(templates, _client(mock_session, cache), seed=0)

    out = tmp_path / "run"
    assert main(["synthesize", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--seed", "0", "--cache-dir", str(cache), "--cache-only",
                 "--output-dir", str(out)]) == 0
    assert "synthesized 12 instances from 12 templates" in \
        capsys.readouterr().out

    synthesized = load_dataset(out / "synthesized.jsonl")
    assert len(synthesized.instances) == 12
    assert all(i.id.startswith("syn-") for i in synthesized.instances)
    assert all(i.origin == "synthesized" for i in synthesized.instances)
    prov_rows = [json.loads(l) for l in
                 (out / "provenance.jsonl").read_text().splitlines()]
    assert {r["id"] for r in prov_rows} == {i.id
                                            for i in synthesized.instances}


# ---------------------------------------------------------------------------
# filter


def _filter_inputs(tmp_path):
    root = tmp_path / "fin"
    root.mkdir()
    train = [_mini_instance("t1", "Train sentence one.", effect="rash"),
             _mini_instance("t2", "Train sentence two.", effect="nausea")]
    write_dataset(train, root / "train.jsonl")
    synth = [Instance("syn-a", "Synthetic sentence a.", (),
                      origin="synthesized"),
             Instance("syn-b", "Synthetic sentence b.", (),
                      origin="synthesized")]
    write_dataset(synth, root / "synthesized.jsonl")
    (root / "train_scores.jsonl").write_text(
        '{"id": "t1", "s_gold": 0.9}\n{"id": "t2", "s_gold": 0.7}\n',
        encoding="utf-8")
    (root / "aug_scores.jsonl").write_text(
        '{"id": "syn-a", "s_gold": 0.82, "s_pred": 0.71, "split": "aug"}\n'
        '{"id": "syn-b", "s_gold": 0.79, "s_pred": 0.65, "split": "aug"}\n',
        encoding="utf-8")
    (root / "validation_scores.jsonl").write_text(
        '{"id": "v1", "s_gold": 0.7, "s_pred": 0.6, "split": "validation"}\n'
        '{"id": "v2", "s_gold": 0.9, "s_pred": 0.8, "split": "validation"}\n',
        encoding="utf-8")
    return root


def test_filter_train_only(tmp_path, capsys):
    root = _filter_inputs(tmp_path)
    out = tmp_path / "out"
    assert main(["filter", "--mode", "Tr.",
                 "--train", str(root / "train.jsonl"),
                 "--output-dir", str(out)]) == 0
    assert "assembled 2 instances under 'Tr.'" in capsys.readouterr().out
    assembled = load_dataset(out / "assembled.jsonl")
    assert [i.id for i in assembled.instances] == ["t1", "t2"]
    assert not (out / "train_filter_audit.json").exists()
    assert not (out / "aug_filter_audit.json").exists()


def test_filter_aug_mode_requires_synthesized(tmp_path, capsys):
    root = _filter_inputs(tmp_path)
    assert main(["filter", "--mode", "Tr.+Aug.",
                 "--train", str(root / "train.jsonl"),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "needs --synthesized" in capsys.readouterr().err


def test_filter_train_filter_requires_scores(tmp_path, capsys):
    root = _filter_inputs(tmp_path)
    assert main(["filter", "--mode", "Tr. Fil.",
                 "--train", str(root / "train.jsonl"),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "needs --train-scores" in capsys.readouterr().err


def test_filter_aug_filter_requires_both_score_files(tmp_path, capsys):
    root = _filter_inputs(tmp_path)
    assert main(["filter", "--mode", "Tr.+Aug. Fil.",
                 "--train", str(root / "train.jsonl"),
                 "--synthesized", str(root / "synthesized.jsonl"),
                 "--aug-scores", str(root / "aug_scores.jsonl"),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "needs --aug-scores and --validation-scores" in \
        capsys.readouterr().err


def test_filter_both_filters_full_run(tmp_path, capsys):
    root = _filter_inputs(tmp_path)
    out = tmp_path / "out"
    assert main(["filter", "--mode", "Tr. Fil.+Aug. Fil.",
                 "--train", str(root / "train.jsonl"),
                 "--synthesized", str(root / "synthesized.jsonl"),
                 "--train-scores", str(root / "train_scores.jsonl"),
                 "--aug-scores", str(root / "aug_scores.jsonl"),
                 "--validation-scores", str(root / "validation_scores.jsonl"),
                 "--output-dir", str(out)]) == 0
    assembled = load_dataset(out / "assembled.jsonl")
    assert [i.id for i in assembled.instances] == ["t1", "syn-a"]

    train_audit = json.loads((out / "train_filter_audit.json").read_text())
    assert train_audit == {"n_scored": 2, "n_retained": 1,
                           "retained": ["t1"]}
    aug_audit = json.loads((out / "aug_filter_audit.json").read_text())
    assert aug_audit == {"n_scored": 2, "n_retained": 1,
                         "retained": ["syn-a"]}
    stats = load_stats(out / "validation_stats.json")
    assert abs(stats.gold_mean - 0.8) < 1e-12
    assert abs(stats.gold_std - 0.1) < 1e-12
    assert abs(stats.pred_mean - 0.7) < 1e-12


def test_filter_plus_aug_keeps_unscored_synth(tmp_path):
    root = _filter_inputs(tmp_path)
    out = tmp_path / "out"
    assert main(["filter", "--mode", "Tr.+Aug.",
                 "--train", str(root / "train.jsonl"),
                 "--synthesized", str(root / "synthesized.jsonl"),
                 "--output-dir", str(out)]) == 0
    assembled = load_dataset(out / "assembled.jsonl")
    assert [i.id for i in assembled.instances] == ["t1", "t2",
                                                   "syn-a", "syn-b"]


# ---------------------------------------------------------------------------
# evaluate


def _write_eval_inputs(tmp_path, degrade=False):
    root = tmp_path / "ein"
    root.mkdir(exist_ok=True)
    gold = [_mini_instance("g1")]
    write_dataset(gold, root / "gold.jsonl")
    events = list(gold[0].events)
    if degrade:
        ev = events[0]
        events = [Event(ev.event_type, trigger=ev.trigger,
                        arguments=ev.arguments[1:])]
    records = [{"id": "g1", "events": [event_to_json(ev) for ev in events],
                "raw_text": None, "warnings": []}]
    write_predictions(records, root / "predictions.jsonl")
    return root


def test_evaluate_identical_predictions(tmp_path, capsys):
    root = _write_eval_inputs(tmp_path)
    out = tmp_path / "out"
    assert main(["evaluate", "--predictions", str(root / "predictions.jsonl"),
                 "--gold", str(root / "gold.jsonl"),
                 "--output-dir", str(out)]) == 0
    line = capsys.readouterr().out.strip()
    assert line == "EM_F1 1.0000  Token_F1 1.0000 (1 instances)"

    em = json.loads((out / "em_report.json").read_text())
    assert em["overall"]["f1"] == 1.0
    token = json.loads((out / "token_report.json").read_text())
    assert token["overall"]["f1"] == 1.0
    table = (out / "report.txt").read_text()
    assert table.splitlines()[-1].startswith("Overall")
    assert not (out / "trigger_report.json").exists()


def test_evaluate_partial_predictions(tmp_path, capsys):
    root = _write_eval_inputs(tmp_path, degrade=True)
    out = tmp_path / "out"
    assert main(["evaluate", "--predictions", str(root / "predictions.jsonl"),
                 "--gold", str(root / "gold.jsonl"),
                 "--output-dir", str(out)]) == 0
    # treatment and its drug sub dropped, effect kept: P 1.0, R 1/3, F1 0.5
    assert "EM_F1 0.5000" in capsys.readouterr().out


def test_evaluate_triggers_flag(tmp_path):
    root = _write_eval_inputs(tmp_path)
    out = tmp_path / "out"
    assert main(["evaluate", "--predictions", str(root / "predictions.jsonl"),
                 "--gold", str(root / "gold.jsonl"), "--triggers",
                 "--output-dir", str(out)]) == 0
    trigger = json.loads((out / "trigger_report.json").read_text())
    assert trigger["overall"]["f1"] == 1.0
    et = json.loads((out / "event_type_report.json").read_text())
    assert et["overall"]["f1"] == 1.0


def test_evaluate_unknown_ids(tmp_path, capsys):
    root = _write_eval_inputs(tmp_path)
    records = [{"id": "ghost", "events": []}]
    write_predictions(records, root / "predictions.jsonl")
    assert main(["evaluate", "--predictions", str(root / "predictions.jsonl"),
                 "--gold", str(root / "gold.jsonl"),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "unknown gold ids" in capsys.readouterr().err


def test_evaluate_gold_superset_allowed(tmp_path):
    root = tmp_path / "ein"
    root.mkdir()
    gold = [_mini_instance("g1"), _mini_instance("g2", "Another sentence.")]
    write_dataset(gold, root / "gold.jsonl")
    records = [{"id": "g1",
                "events": [event_to_json(ev) for ev in gold[0].events]}]
    write_predictions(records, root / "predictions.jsonl")
    assert main(["evaluate", "--predictions", str(root / "predictions.jsonl"),
                 "--gold", str(root / "gold.jsonl"),
                 "--output-dir", str(tmp_path / "out")]) == 0


def test_resolved_config_identical_across_output_dirs(tmp_path):
    root = _write_eval_inputs(tmp_path)
    args = ["evaluate", "--predictions", str(root / "predictions.jsonl"),
            "--gold", str(root / "gold.jsonl")]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    meta_a = (tmp_path / "a" / "resolved_config.json").read_bytes()
    meta_b = (tmp_path / "b" / "resolved_config.json").read_bytes()
    assert meta_a == meta_b


# ---------------------------------------------------------------------------
# report


def _fake_run(dirpath: Path, f1: float):
    dirpath.mkdir(parents=True, exist_ok=True)
    obj = {"level": "em",
           "overall": {"precision": f1, "recall": f1, "f1": f1,
                       "matched": 0, "n_pred": 0, "n_gold": 0},
           "groups": {}, "kinds": {}}
    for name in ("em_report.json", "token_report.json"):
        (dirpath / name).write_text(json.dumps(obj), encoding="utf-8")


def test_report_summary_lines(tmp_path, capsys):
    runs = [tmp_path / "r1", tmp_path / "r2"]
    _fake_run(runs[0], 1.0)
    _fake_run(runs[1], 0.5)
    out = tmp_path / "out"
    assert main(["report", str(runs[0]), str(runs[1]),
                 "--output-dir", str(out)]) == 0
    assert "aggregated 2 runs" in capsys.readouterr().out

    text = (out / "summary.txt").read_text()
    assert "em_overall_f1  75.00 ±35.36" in text
    assert "token_overall_f1  75.00 ±35.36" in text

    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_runs"] == 2
    assert abs(summary["metrics"]["em_overall_f1"]["mean"] - 0.75) < 1e-12
    assert "f_test" not in summary


def test_report_with_f_test(tmp_path):
    dirs = {}
    for name, f1 in (("a1", 1.0), ("a2", 0.5), ("b1", 0.8), ("b2", 0.4)):
        dirs[name] = tmp_path / name
        _fake_run(dirs[name], f1)
    out = tmp_path / "out"
    assert main(["report", str(dirs["a1"]), str(dirs["a2"]),
                 str(dirs["b1"]), str(dirs["b2"]),
                 "--compare-a", str(dirs["a1"]), "--compare-a",
                 str(dirs["a2"]),
                 "--compare-b", str(dirs["b1"]), "--compare-b",
                 str(dirs["b2"]),
                 "--output-dir", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    f_value, p_value = f_test_variance([1.0, 0.5], [0.8, 0.4])
    assert summary["f_test"]["metric"] == "em_overall_f1"
    assert abs(summary["f_test"]["F"] - f_value) < 1e-12
    assert abs(summary["f_test"]["p"] - p_value) < 1e-12
    assert summary["f_test"]["n_a"] == 2
    assert summary["f_test"]["n_b"] == 2
    text = (out / "summary.txt").read_text()
    assert f"F-test on em_overall_f1: F={f_value:.4f} p={p_value:.4f}" in text


def test_report_missing_metric_in_compare(tmp_path, capsys):
    for name, f1 in (("a1", 1.0), ("a2", 0.5)):
        _fake_run(tmp_path / name, f1)
    assert main(["report", str(tmp_path / "a1"), str(tmp_path / "a2"),
                 "--compare-a", str(tmp_path / "a1"),
                 "--compare-a", str(tmp_path / "a2"),
                 "--compare-b", str(tmp_path / "a1"),
                 "--compare-b", str(tmp_path / "a2"),
                 "--metric", "em_bogus_f1",
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "missing from a compared run" in capsys.readouterr().err


def test_report_requires_reports_on_disk(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty), str(empty),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "missing em_report.json" in capsys.readouterr().err


def test_report_single_run_fails(tmp_path, capsys):
    _fake_run(tmp_path / "r1", 1.0)
    assert main(["report", str(tmp_path / "r1"),
                 "--output-dir", str(tmp_path / "out")]) == 1
    assert "TooFewRuns" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# export-pairs


def test_export_pairs_rows(tmp_path, capsys):
    root = tmp_path / "in"
    root.mkdir()
    instances = [_mini_instance("p2", "Second sentence with rash."),
                 _mini_instance("p1", "First sentence with rash.")]
    write_dataset(instances, root / "dataset.jsonl")
    out = tmp_path / "out"
    assert main(["export-pairs", "--dataset", str(root / "dataset.jsonl"),
                 "--output-dir", str(out)]) == 0
    assert "exported 2 pairs" in capsys.readouterr().out

    rows = [json.loads(l) for l in
            (out / "pairs.jsonl").read_text().splitlines()]
    assert [r["id"] for r in rows] == ["p1", "p2"]
    by_id = {i.id: i for i in instances}
    for row in rows:
        assert set(row) == {"id", "text", "input", "target"}
        inst = by_id[row["id"]]
        assert row["text"] == inst.text
        assert row["input"] == build_finetune_input(inst.text)
        assert row["target"] == linearize(inst.events, include_trigger=True)


def test_export_pairs_no_trigger(tmp_path):
    root = tmp_path / "in"
    root.mkdir()
    instances = [_mini_instance("p1")]
    write_dataset(instances, root / "dataset.jsonl")
    out = tmp_path / "out"
    assert main(["export-pairs", "--dataset", str(root / "dataset.jsonl"),
                 "--no-trigger", "--output-dir", str(out)]) == 0
    [row] = [json.loads(l) for l in
             (out / "pairs.jsonl").read_text().splitlines()]
    assert row["target"] == linearize(instances[0].events,
                                      include_trigger=False)
    assert "caused" not in row["target"]


def test_export_pairs_respects_split(data_dir, tmp_path, corpus):
    out = tmp_path / "out"
    assert main(["export-pairs", "--dataset", str(data_dir / "dataset.jsonl"),
                 "--splits", str(data_dir / "splits.json"),
                 "--split", "train", "--output-dir", str(out)]) == 0
    rows = [json.loads(l) for l in
            (out / "pairs.jsonl").read_text().splitlines()]
    train_ids = sorted(i.id for i in _by_split(corpus, data_dir, "train"))
    assert [r["id"] for r in rows] == train_ids
