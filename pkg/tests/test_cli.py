"""
test_cli.py — End-to-end runs of the ``minihes`` command line.
"""

import argparse
import csv
import json

import pytest

from minihes.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main, resolve_config
from minihes.factors import load_factors
from minihes.schemas import RunManifest, SpeedupReport, TrainReport, VerificationReport


def _read_csv(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _manifest(directory):
    return RunManifest.model_validate_json((directory / "manifest.json").read_text(encoding="utf-8"))


@pytest.fixture
def splits(tmp_path, ratings_file):
    out = tmp_path / "splits"
    assert main(["split", "--input", str(ratings_file), "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


def _split_args(splits, out):
    return [
        "--train", str(splits / "train.tsv"),
        "--val", str(splits / "val.tsv"),
        "--test", str(splits / "test.tsv"),
        "--out", str(out),
    ]


# ── split ─────────────────────────────────────────────────────────────────────

def test_split_writes_parts_and_manifest(splits, ratings_file):
    for name in ("train", "val", "test"):
        assert (splits / f"{name}.tsv").exists()
    manifest = _manifest(splits)
    assert manifest.command == "split"
    assert manifest.seed == 3
    assert set(manifest.dataset_checksums) == {"input", "train", "val", "test"}
    total = sum(len((splits / f"{n}.tsv").read_text().splitlines()) for n in ("train", "val", "test"))
    assert total == len(ratings_file.read_text().splitlines())


def test_split_rerun_is_identical(tmp_path, ratings_file, splits):
    again = tmp_path / "again"
    main(["split", "--input", str(ratings_file), "--seed", "3", "--out", str(again)])
    assert _manifest(again).dataset_checksums == _manifest(splits).dataset_checksums


def test_split_rejects_ratios_not_summing_to_one(tmp_path, ratings_file):
    code = main(["split", "--input", str(ratings_file), "--ratios", "0.5,0.2,0.2", "--out", str(tmp_path / "x")])
    assert code == EXIT_CONFIG


def test_missing_input_file_fails(tmp_path):
    code = main(["split", "--input", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "x")])
    assert code == EXIT_FAILURE


# ── train ─────────────────────────────────────────────────────────────────────

def test_train_writes_report_trace_and_factors(tmp_path, splits, capsys):
    out = tmp_path / "run"
    code = main(["train", *_split_args(splits, out), "--f", "3", "--max-epochs", "1", "--lambda", "0.01"])
    assert code == EXIT_OK
    assert "test RMSE=" in capsys.readouterr().out

    report = TrainReport.model_validate_json((out / "report.json").read_text(encoding="utf-8"))
    assert report.epochs_run == 1
    assert report.config.lam == 0.01
    assert report.test_rmse is not None

    trace = _read_csv(out / "trace.csv")
    assert len(trace) == 1
    assert trace[0]["epoch"] == "1"

    state, seed = load_factors(out / "factors.bin")
    assert state.f == 3
    assert seed == 0

    manifest = _manifest(out)
    assert manifest.command == "train"
    assert manifest.derived_seeds["init"] != manifest.derived_seeds["split"]


def test_train_first_order_uses_same_outputs(tmp_path, splits):
    out = tmp_path / "adam"
    code = main(["train", *_split_args(splits, out), "--optimizer", "adam", "--f", "3", "--max-epochs", "2"])
    assert code == EXIT_OK
    trace = _read_csv(out / "trace.csv")
    assert list(trace[0]) == ["epoch", "train_loss", "val_rmse", "val_mae", "val_metric", "seconds", "gamma", "cg_mean_iters"]
    assert trace[0]["gamma"] == ""


def test_train_rejects_zero_dimension(tmp_path, splits):
    assert main(["train", *_split_args(splits, tmp_path / "bad"), "--f", "0"]) == EXIT_CONFIG


def test_train_rejects_unknown_optimizer(tmp_path, splits):
    assert main(["train", *_split_args(splits, tmp_path / "bad"), "--optimizer", "lbfgs"]) == EXIT_CONFIG


def test_train_block_order_flag(tmp_path, splits):
    out = tmp_path / "joint"
    code = main(["train", *_split_args(splits, out), "--f", "3", "--max-epochs", "1", "--block-order", "joint"])
    assert code == EXIT_OK
    report = TrainReport.model_validate_json((out / "report.json").read_text(encoding="utf-8"))
    assert report.config.block_order == "joint"


# ── grid ──────────────────────────────────────────────────────────────────────

def test_grid_trains_every_pair_and_keeps_the_best(tmp_path, splits):
    out = tmp_path / "grid"
    code = main([
        "grid", *_split_args(splits, out),
        "--f", "3", "--max-epochs", "2", "--lambdas", "0,0.01", "--taus", "0.1,1",
    ])
    assert code == EXIT_OK
    rows = _read_csv(out / "grid.csv")
    assert [(float(r["lambda"]), float(r["tau"])) for r in rows] == [(0.0, 0.1), (0.0, 1.0), (0.01, 0.1), (0.01, 1.0)]
    best = min(float(r["best_validation"]) for r in rows)
    report = TrainReport.model_validate_json((out / "report.json").read_text(encoding="utf-8"))
    assert report.best_validation == pytest.approx(best)


# ── verify ────────────────────────────────────────────────────────────────────

def test_verify_passes(tmp_path, capsys):
    out = tmp_path / "verify"
    assert main(["verify", "--instances", "3", "--samples", "9", "--out", str(out)]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
    report = VerificationReport.model_validate_json((out / "verification.json").read_text(encoding="utf-8"))
    assert report.passed
    assert _manifest(out).command == "verify"


def test_verify_reports_injected_fault(capsys):
    assert main(["verify", "--instances", "3", "--samples", "9", "--inject-fault", "0.01"]) == EXIT_FAILURE
    assert "FAIL" in capsys.readouterr().out


def test_verify_rejects_instances_above_cap():
    assert main(["verify", "--users", "40", "--items", "40", "--f", "5"]) == EXIT_CONFIG


# ── bench ─────────────────────────────────────────────────────────────────────

def test_bench_on_synthetic_data(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main([
        "bench", "--synthetic", "2000", "--threads", "1,2", "--epochs", "1",
        "--f", "3", "--out", str(out),
    ])
    assert code == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "Dataset,Thread,Time,Speedup"
    report = SpeedupReport.model_validate_json((out / "speedup.json").read_text(encoding="utf-8"))
    assert [row.threads for row in report.rows] == [1, 2]
    assert report.rows[0].speedup == 1.0
    assert _manifest(out).config["thread_counts"] == [1, 2]


def test_bench_needs_a_dataset(tmp_path):
    assert main(["bench", "--out", str(tmp_path / "b")]) == EXIT_CONFIG


# ── Configuration precedence ──────────────────────────────────────────────────

def _namespace(config=None, **flags):
    fields = {
        "config": config, "optimizer": None, "f": None, "lam": None, "gamma": None, "tau": None,
        "cg_max_iters": None, "lr": None, "beta1": None, "beta2": None, "epsilon": None,
        "max_epochs": None, "patience": None, "seed": None, "threads": None, "metric": None,
        "adaptive_gamma": None, "warm_start": None, "balanced_partition": None,
    }
    fields.update(flags)
    return argparse.Namespace(**fields)


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"lambda": 0.05, "f": 7, "optimizer": "yogi"}), encoding="utf-8")
    config = resolve_config(_namespace(str(path), f=4, metric="mae"))
    assert config.lam == 0.05
    assert config.f == 4
    assert config.optimizer == "yogi"
    assert config.eval_metric == "mae"


def test_environment_threads_are_the_lowest_layer(tmp_path, monkeypatch):
    monkeypatch.setenv("MINIHES_THREADS", "3")
    assert resolve_config(_namespace()).threads == 3
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"threads": 5}), encoding="utf-8")
    assert resolve_config(_namespace(str(path))).threads == 5
    assert resolve_config(_namespace(str(path), threads=6)).threads == 6


def test_config_file_must_be_an_object(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ValueError):
        resolve_config(_namespace(str(path)))
