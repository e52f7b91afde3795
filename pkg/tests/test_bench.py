"""
test_bench.py — Thread-scaling benchmark and its outputs.
"""

import csv
import os

import pytest

import minihes.bench
from minihes.bench import bench_threads, write_speedup_csv
from minihes.data import synthetic_low_rank
from minihes.errors import ConfigError, ThreadMismatchError
from minihes.schemas import OptimizerConfig
from minihes.trainer import train as real_train

CONFIG = OptimizerConfig(f=3, lam=0.01, gamma=1.0, tau=0.1)


def test_single_thread_count_is_its_own_baseline(synthetic):
    report = bench_threads(synthetic, CONFIG, [2], repeats=3, epochs=2, name="syn")
    assert [row.speedup for row in report.rows] == [1.0]
    assert report.baseline_threads == 2
    assert len(report.rows[0].seconds) == 3
    assert len(report.rows[0].worker_seconds) == 2


def test_several_thread_counts(synthetic):
    report = bench_threads(synthetic, CONFIG, [1, 2, 3], repeats=3, epochs=1)
    assert [row.threads for row in report.rows] == [1, 2, 3]
    assert report.rows[0].speedup == 1.0
    assert all(row.speedup > 0.0 for row in report.rows)
    assert all(row.median_seconds > 0.0 for row in report.rows)


@pytest.mark.parametrize(
    "kwargs",
    [{"thread_counts": []}, {"thread_counts": [0, 2]}, {"repeats": 2}, {"epochs": 0}],
)
def test_bench_rejects_bad_arguments(synthetic, kwargs):
    arguments = {"thread_counts": [1, 2], "repeats": 3, "epochs": 1}
    arguments.update(kwargs)
    with pytest.raises(ConfigError):
        bench_threads(synthetic, CONFIG, **arguments)


def test_mismatched_outputs_abort_the_benchmark(synthetic, monkeypatch):
    def skewed_train(train_data, val_data, config, pool=None, early_stopping=True):
        state, report = real_train(train_data, val_data, config, pool=pool, early_stopping=early_stopping)
        if config.threads == 2:
            state.values[0] += 1e-12
        return state, report

    monkeypatch.setattr(minihes.bench, "train", skewed_train)
    with pytest.raises(ThreadMismatchError):
        bench_threads(synthetic, CONFIG, [1, 2], repeats=3, epochs=1)


def test_speedup_csv_layout(synthetic, tmp_path):
    report = bench_threads(synthetic, CONFIG, [1, 2], repeats=3, epochs=1, name="syn")
    path = tmp_path / "speedup.csv"
    write_speedup_csv(report, path)
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Dataset", "Thread", "Time", "Speedup"]
    assert [r[1] for r in rows[1:]] == ["1", "2"]
    assert rows[1][0] == "syn"
    assert rows[1][3] == "1.00"
    assert " ± " in rows[1][2]


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 8, reason="needs at least 8 cores")
def test_median_time_does_not_grow_with_threads():
    data = synthetic_low_rank(10_000, 5_000, rank=5, density=0.02, seed=1)
    assert len(data) == 1_000_000
    config = OptimizerConfig(f=10, lam=0.01, gamma=1.0, tau=0.1)
    report = bench_threads(data, config, [2, 4, 8], repeats=3, epochs=2)
    medians = [row.median_seconds for row in report.rows]
    assert [row.threads for row in report.rows] == [2, 4, 8]
    assert medians[0] >= medians[1] >= medians[2]
