"""Tests for the training loop, evaluation arithmetic, and experiment drivers."""

import dataclasses
import json
import os
import re
from collections import OrderedDict

import numpy as np
import pytest

from conftest import build_model, desk_config
from mvqa.config import ConfigError, TrainConfig
from mvqa.data import CLOSED, OPEN, DatasetError
from mvqa.fixtures import IMAGE_SIZE, make_fixture
from mvqa.train import (
    ABLATION_ROWS,
    GAMMA_GRID,
    EvalResult,
    MetricsRecord,
    NumericalError,
    ablation_run,
    evaluate_checkpoint,
    evaluate_model,
    explain_sample,
    format_ablation_table,
    format_gamma_table,
    gamma_sweep,
    load_corpus,
    train,
)


# ---------------------------------------------------------------------------
# fixtures


@pytest.fixture(scope="module")
def dataset_path(corpus_dir):
    return str(corpus_dir / "dataset.json")


@pytest.fixture(scope="module")
def anomalous_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("anomalous")
    make_fixture(str(root), seed=0, anomalies=True)
    return root


@pytest.fixture(scope="module")
def smoke(dataset_path, tmp_path_factory):
    """One short training run shared by the checks below."""
    out_dir = tmp_path_factory.mktemp("smoke-run")
    logged = []
    outcome = train(desk_config(epochs=12, seed=0), dataset_path=dataset_path,
                    out_dir=str(out_dir), log=logged.append)
    return {"outcome": outcome, "out_dir": out_dir,
            "dataset": dataset_path, "log": logged}


def _micro_corpus(root):
    """Two train samples whose answer vocabularies are singletons, so the
    argmax prediction is correct from the very first epoch."""
    images = root / "images"
    images.mkdir()
    rng = np.random.default_rng(5)
    for name in ("a", "b"):
        np.save(str(images / f"{name}.npy"),
                rng.uniform(0.0, 1.0, (IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32))
    records = [
        {"sample_id": "m-closed", "image_ref": "images/a.npy",
         "question": "is the heart enlarged", "answer": "yes",
         "answer_type": "closed", "split": "train"},
        {"sample_id": "m-open", "image_ref": "images/b.npy",
         "question": "what organ is shown", "answer": "lung",
         "answer_type": "open", "split": "train"},
    ]
    path = root / "dataset.json"
    path.write_text(json.dumps({"samples": records}), encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# corpus loading


def test_load_corpus_clean(dataset_path):
    corpus = load_corpus(dataset_path)
    assert len(corpus["samples"]) == 20
    assert corpus["warnings"] == []
    assert corpus["answers"].size(CLOSED) == 2
    assert corpus["answers"].size(OPEN) == 8
    assert len(corpus["questions"]) > 2
    assert corpus["root"] == os.path.dirname(dataset_path)


def test_load_corpus_strict_rejects_structural_findings(anomalous_dir):
    with pytest.raises(DatasetError) as excinfo:
        load_corpus(str(anomalous_dir / "dataset.json"), strict=True)
    message = str(excinfo.value)
    assert "structural findings" in message
    assert "duplicate" in message
    assert "dangling_image" in message


def test_load_corpus_lenient_reports_label_warnings(anomalous_dir):
    corpus = load_corpus(str(anomalous_dir / "dataset.json"), strict=False)
    kinds = sorted(f.kind for f in corpus["warnings"])
    assert kinds == ["type_mismatch", "type_mismatch",
                     "undefined_answer", "undefined_answer", "undefined_answer"]


def test_train_strict_aborts_on_structural_findings(anomalous_dir):
    with pytest.raises(DatasetError):
        train(desk_config(epochs=1), dataset_path=str(anomalous_dir / "dataset.json"))


# ---------------------------------------------------------------------------
# metrics records and evaluation arithmetic


def test_metrics_record_total_and_serialization():
    record = MetricsRecord(3, 0.5, 0.25, 1.6, 10.0, 20.0, 12.5, wall_time=123.4)
    assert record.total == 0.5 + 1.6 * 0.25
    payload = record.to_dict()
    assert set(payload) == {"epoch", "loss", "open_accuracy",
                            "closed_accuracy", "overall_accuracy"}
    assert set(payload["loss"]) == {"l_c", "l_mq", "gamma", "total"}
    assert "wall" not in record.to_json_line()


def test_metrics_line_ignores_wall_time():
    fast = MetricsRecord(0, 1.0, 0.5, 0.2, 0.0, 0.0, 0.0, wall_time=0.01)
    slow = MetricsRecord(0, 1.0, 0.5, 0.2, 0.0, 0.0, 0.0, wall_time=99.0)
    assert fast.to_json_line() == slow.to_json_line()
    assert fast.to_json_line() == json.dumps(fast.to_dict(), sort_keys=True)


def test_eval_result_percentages():
    half = EvalResult(1, 2, 1, 2)
    assert half.open_accuracy == 50.0
    assert half.closed_accuracy == 50.0
    assert half.overall_accuracy == 50.0


def test_eval_result_pools_counts_instead_of_averaging_rates():
    skewed = EvalResult(1, 1, 0, 3)
    assert skewed.open_accuracy == 100.0
    assert skewed.closed_accuracy == 0.0
    assert skewed.overall_accuracy == 25.0


def test_eval_result_empty_is_zero_not_an_error():
    empty = EvalResult(0, 0, 0, 0)
    assert empty.open_accuracy == 0.0
    assert empty.closed_accuracy == 0.0
    assert empty.overall_accuracy == 0.0
    assert set(empty.to_dict()) == {"open_accuracy", "closed_accuracy",
                                    "overall_accuracy", "n_open", "n_closed"}


# ---------------------------------------------------------------------------
# the training loop itself


def test_train_requires_a_dataset():
    with pytest.raises(ConfigError, match="no dataset"):
        train(desk_config(epochs=1))


def test_train_uses_config_dataset_as_fallback(dataset_path):
    outcome = train(desk_config(epochs=1, dataset=dataset_path))
    assert len(outcome.metrics) == 1


def test_train_runs_every_epoch_and_logs(smoke):
    outcome = smoke["outcome"]
    assert [m.epoch for m in outcome.metrics] == list(range(12))
    assert outcome.excluded == []
    assert len(smoke["log"]) == 12
    assert smoke["log"][0].startswith("epoch 0: loss ")


def test_train_loss_trends_downward(smoke):
    totals = [m.total for m in smoke["outcome"].metrics]
    assert np.mean(totals[-4:]) < np.mean(totals[:4])
    assert all(np.isfinite(totals))


def test_train_records_effective_gamma_and_total(smoke):
    for record in smoke["outcome"].metrics:
        assert record.gamma == 1.6
        assert record.total == record.l_c + record.gamma * record.l_mq


def test_train_writes_run_directory(smoke):
    out_dir = smoke["out_dir"]
    for name in ("config.json", "metrics.jsonl", "best.mvqw", "last.mvqw"):
        assert (out_dir / name).exists(), name
    saved = TrainConfig.from_json(str(out_dir / "config.json"))
    assert saved.to_dict() == desk_config(epochs=12, seed=0).to_dict()


def test_metrics_file_matches_in_memory_records(smoke):
    lines = (smoke["out_dir"] / "metrics.jsonl").read_text().splitlines()
    records = smoke["outcome"].metrics
    assert len(lines) == len(records)
    for line, record in zip(lines, records):
        assert line == record.to_json_line()


def test_best_epoch_is_first_accuracy_maximum(smoke):
    accuracies = [m.overall_accuracy for m in smoke["outcome"].metrics]
    assert smoke["outcome"].best_epoch == int(np.argmax(accuracies))


def test_best_checkpoint_evaluates_on_the_test_split(smoke):
    result = evaluate_checkpoint(smoke["outcome"].best_path, smoke["dataset"])
    assert result.n_open == 3
    assert result.n_closed == 1
    assert result.overall_accuracy == 100.0 * (
        result.correct_open + result.correct_closed) / 4


def test_checkpoint_rejects_a_mismatched_corpus(smoke, tmp_path):
    other = _micro_corpus(tmp_path)
    with pytest.raises(ConfigError, match="answer vocabulary"):
        evaluate_checkpoint(smoke["outcome"].best_path, other)


def test_stop_when_perfect_halts_early(tmp_path):
    path = _micro_corpus(tmp_path)
    outcome = train(desk_config(epochs=50, seed=1), dataset_path=path,
                    stop_when_perfect=True)
    assert len(outcome.metrics) == 1
    assert outcome.metrics[-1].overall_accuracy == 100.0


def test_identical_runs_write_identical_metrics_bytes(dataset_path, tmp_path):
    for sub in ("one", "two"):
        train(desk_config(epochs=4, seed=11), dataset_path=dataset_path,
              out_dir=str(tmp_path / sub))
    first = (tmp_path / "one" / "metrics.jsonl").read_bytes()
    second = (tmp_path / "two" / "metrics.jsonl").read_bytes()
    assert first == second
    assert len(first.splitlines()) == 4


def test_zero_weight_matches_disabled_agreement_loss(dataset_path):
    zeroed = train(desk_config(epochs=4, seed=3, gamma=0.0, use_iqc_loss=True),
                   dataset_path=dataset_path)
    disabled = train(desk_config(epochs=4, seed=3, gamma=1.6, use_iqc_loss=False),
                     dataset_path=dataset_path)
    for a, b in zip(zeroed.metrics, disabled.metrics):
        assert (a.l_c, a.l_mq, a.total) == (b.l_c, b.l_mq, b.total)
        assert a.gamma == b.gamma == 0.0


def test_non_finite_loss_aborts_and_names_the_tensor(dataset_path):
    config = desk_config(epochs=3, seed=0, learning_rate=1e30)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError) as excinfo:
            train(config, dataset_path=dataset_path)
    assert "first non-finite tensor" in str(excinfo.value)
    assert excinfo.value.tensor_name
    assert "op '" in excinfo.value.tensor_name


# ---------------------------------------------------------------------------
# evaluation helpers


def test_evaluate_model_counts_only_the_requested_split(smoke, dataset_path):
    corpus = load_corpus(dataset_path)
    model = smoke["outcome"].model
    test_result = evaluate_model(model, corpus["samples"], corpus["root"])
    train_result = evaluate_model(model, corpus["samples"], corpus["root"],
                                  split="train")
    assert (test_result.n_open, test_result.n_closed) == (3, 1)
    assert (train_result.n_open, train_result.n_closed) == (8, 8)


def test_final_train_accuracy_matches_last_metrics_row(smoke, dataset_path):
    corpus = load_corpus(dataset_path)
    outcome = smoke["outcome"]
    rescored = evaluate_model(outcome.model, corpus["samples"], corpus["root"],
                              split="train")
    assert rescored.overall_accuracy == outcome.metrics[-1].overall_accuracy


# ---------------------------------------------------------------------------
# experiment drivers


def test_ablation_runs_all_four_switch_combinations(dataset_path, tmp_path):
    config = desk_config(epochs=2, seed=7)
    rows = ablation_run(config, dataset_path=dataset_path, out_dir=str(tmp_path))
    assert list(rows) == [label for label, _, _ in ABLATION_ROWS]
    for label, result in rows.items():
        assert (result.n_open, result.n_closed) == (3, 1)
        assert (tmp_path / label.replace("+", "_") / "metrics.jsonl").exists()


def test_ablation_baseline_equals_a_direct_run_with_both_switches_off(dataset_path):
    config = desk_config(epochs=2, seed=7)
    rows = ablation_run(config, dataset_path=dataset_path)
    direct = train(desk_config(epochs=2, seed=7, use_i2q_attention=False,
                               use_iqc_loss=False), dataset_path=dataset_path)
    corpus = load_corpus(dataset_path)
    scored = evaluate_model(direct.model, corpus["samples"], corpus["root"])
    baseline = rows["baseline"]
    assert baseline.open_accuracy == scored.open_accuracy
    assert baseline.closed_accuracy == scored.closed_accuracy
    assert baseline.overall_accuracy == scored.overall_accuracy


def test_gamma_grid_spans_zero_to_two():
    assert len(GAMMA_GRID) == 11
    assert GAMMA_GRID[0] == 0.0
    assert GAMMA_GRID[-1] == 2.0
    assert GAMMA_GRID == tuple(round(0.2 * k, 1) for k in range(11))
    assert TrainConfig().gamma == 1.6


def test_gamma_sweep_runs_requested_values(dataset_path):
    config = desk_config(epochs=2, seed=5)
    results = gamma_sweep(config, dataset_path=dataset_path, values=(0.0, 1.6))
    assert list(results) == [0.0, 1.6]
    for result in results.values():
        assert (result.n_open, result.n_closed) == (3, 1)


def test_gamma_sweep_zero_column_matches_disabled_loss(dataset_path):
    config = desk_config(epochs=2, seed=5)
    results = gamma_sweep(config, dataset_path=dataset_path, values=(0.0,))
    direct = train(desk_config(epochs=2, seed=5, use_iqc_loss=False),
                   dataset_path=dataset_path)
    corpus = load_corpus(dataset_path)
    scored = evaluate_model(direct.model, corpus["samples"], corpus["root"])
    assert results[0.0].overall_accuracy == scored.overall_accuracy


def test_gamma_sweep_rejects_negative_values(dataset_path):
    with pytest.raises(ConfigError, match="nonnegative"):
        gamma_sweep(desk_config(epochs=1), dataset_path=dataset_path,
                    values=(0.4, -0.2))


# ---------------------------------------------------------------------------
# table formatting


def _fake_ablation_rows():
    return OrderedDict([
        ("baseline", EvalResult(1, 3, 0, 1)),
        ("baseline+att", EvalResult(2, 3, 1, 1)),
        ("baseline+iqc", EvalResult(0, 3, 1, 1)),
        ("baseline+att+iqc", EvalResult(3, 3, 1, 1)),
    ])


def test_ablation_table_shape():
    table = format_ablation_table(_fake_ablation_rows())
    lines = table.splitlines()
    assert len(lines) == 6  # header, rule, four data rows
    assert table.endswith("\n")
    assert re.fullmatch(r"-+(  -+)*", lines[1])
    header = re.split(r"\s{2,}", lines[0])
    assert header == ["model", "open", "closed", "overall"]
    for line in lines:
        assert line == line.rstrip()
    cells = re.split(r"\s{2,}", lines[2])
    assert cells == ["baseline", "33.33", "0.00", "25.00"]
    cells = re.split(r"\s{2,}", lines[5])
    assert cells == ["baseline+att+iqc", "100.00", "100.00", "100.00"]


def test_ablation_table_is_byte_stable():
    rows = _fake_ablation_rows()
    assert format_ablation_table(rows) == format_ablation_table(rows)


def test_gamma_table_marks_the_best_value():
    results = OrderedDict([
        (0.0, EvalResult(1, 3, 0, 1)),
        (1.6, EvalResult(3, 3, 1, 1)),
        (2.0, EvalResult(2, 3, 1, 1)),
    ])
    table = format_gamma_table(results)
    lines = table.splitlines()
    assert lines[-1] == "best gamma: 1.6"
    starred = [line for line in lines if "*" in line]
    assert len(starred) == 1
    assert starred[0].startswith("1.6 *")
    header = re.split(r"\s{2,}", lines[0])
    assert header == ["gamma", "open", "closed", "overall"]


# ---------------------------------------------------------------------------
# attention explanations


def test_explain_sample_lists_every_token_position(corpus):
    model = build_model(corpus)
    sample = next(s for s in corpus["samples"] if s.split == "test")
    report = explain_sample(model, sample, str(corpus["dir"]))
    lines = report.splitlines()
    assert lines[0].startswith(f"sample {sample.sample_id}: ")
    assert sample.question in lines[0]
    assert lines[1].startswith("predicted: ")
    header = re.split(r"\s{2,}", lines[2])
    assert header == ["word", "text_view", "visual_view"]
    data = lines[4:]
    assert len(data) == model.config.n_tokens
    text_total = sum(float(re.split(r"\s{2,}", row)[1]) for row in data)
    visual_total = sum(float(re.split(r"\s{2,}", row)[2]) for row in data)
    assert abs(text_total - 1.0) < 1e-2
    assert abs(visual_total - 1.0) < 1e-2
