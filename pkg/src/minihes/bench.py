"""
bench.py — Thread-scaling benchmark.

Runs the same fixed training workload (fixed epoch count, early stopping off,
same seed) once per repeat for every thread count. Before any timing is
reported, the final factor vectors and loss traces of all thread counts are
compared bitwise; a mismatch is a hard failure.

Timing covers the full epoch loop (gradient, CG solve, update, loss and
validation passes), not only the curvature work.
"""

from __future__ import annotations

import csv
import logging
import statistics
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from minihes.configuration import RuntimeSettings
from minihes.data import HdiDataset
from minihes.errors import ConfigError, ThreadMismatchError
from minihes.parallel import WorkerPool
from minihes.schemas import OptimizerConfig, SpeedupReport, SpeedupRow
from minihes.trainer import train

logger = logging.getLogger(__name__)


def bench_threads(
    dataset: HdiDataset,
    config: OptimizerConfig,
    thread_counts: Sequence[int],
    repeats: int = 3,
    epochs: int = 5,
    name: str = "dataset",
    validation: Optional[HdiDataset] = None,
) -> SpeedupReport:
    """
    Median ± sd wall seconds per thread count; speedup relative to the first count.

    The workload trains on ``dataset`` and validates on ``validation`` (the
    training data itself when omitted).
    """
    if not thread_counts:
        raise ConfigError("thread_counts must not be empty")
    if any(t < 1 for t in thread_counts):
        raise ConfigError(f"thread counts must be >= 1, got {list(thread_counts)}")
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3, got {repeats}")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")

    val = validation if validation is not None else dataset
    reference: Optional[tuple[int, np.ndarray, list[float]]] = None
    timings: dict[int, list[float]] = {}
    worker_seconds: dict[int, list[float]] = {}
    eval_chunk = RuntimeSettings().eval_chunk

    for threads in thread_counts:
        run_config = config.model_copy(
            update={"threads": threads, "max_epochs": epochs}
        )
        timings[threads] = []
        for rep in range(repeats):
            with WorkerPool.for_dataset(dataset, threads, run_config.balanced_partition, eval_chunk) as pool:
                state, report = train(dataset, val, run_config, pool=pool, early_stopping=False)
                worker_seconds[threads] = list(pool.last_worker_seconds)
            timings[threads].append(report.total_seconds)
            logger.info(
                "bench %s: threads=%d repeat=%d %.3fs", name, threads, rep + 1, report.total_seconds
            )

            losses = report.losses()
            if reference is None:
                reference = (threads, state.values.copy(), losses)
            elif not (np.array_equal(reference[1], state.values) and reference[2] == losses):
                raise ThreadMismatchError(
                    f"{threads}-thread run (repeat {rep + 1}) differs from the "
                    f"{reference[0]}-thread reference"
                )

    baseline = thread_counts[0]
    base_median = statistics.median(timings[baseline])
    rows = []
    for threads in thread_counts:
        secs = timings[threads]
        median = statistics.median(secs)
        rows.append(
            SpeedupRow(
                threads=threads,
                median_seconds=median,
                std_seconds=statistics.stdev(secs),
                speedup=1.0 if threads == baseline else base_median / median,
                seconds=secs,
                worker_seconds=worker_seconds[threads],
            )
        )
    return SpeedupReport(
        dataset=name,
        baseline_threads=baseline,
        epochs=epochs,
        repeats=repeats,
        rows=rows,
    )


def write_speedup_csv(report: SpeedupReport, path: str | Path) -> None:
    """Dataset, Thread, Time (median ± sd seconds), Speedup."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Dataset", "Thread", "Time", "Speedup"])
        for row in report.rows:
            writer.writerow([
                report.dataset,
                row.threads,
                f"{row.median_seconds:.3f} ± {row.std_seconds:.3f}",
                f"{row.speedup:.2f}",
            ])


__all__ = ["bench_threads", "write_speedup_csv"]
