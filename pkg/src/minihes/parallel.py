"""
parallel.py — Master–workers execution of per-entity block work.

The master splits the |U|+|I| entities into one or more contiguous ranges per
worker (users first, then items; with two or more workers half of them take
user blocks and half take item blocks). Each worker walks its ranges in
bounded tiles, calls the block task on every tile and writes the result into
its own slice of a preallocated output. Workers never share a writable
slice, so there is no locking and no shared accumulation.

Block tasks must compute each entity's rows from that entity's data alone
(see factors.row_dot / factors.segment_sum). Under that contract the assembled
output is bitwise identical for every worker count and tile size.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from minihes.configuration import DEFAULT_EVAL_CHUNK
from minihes.data import HdiDataset
from minihes.errors import BlockTaskError, ConfigError, NonFiniteError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# (lo, hi) -> array of shape (hi - lo, width)
BlockTask = Callable[[int, int], np.ndarray]

DEFAULT_TILE_NNZ = 1 << 16
DEFAULT_TILE_ENTITIES = 1 << 14


# ── Partitioning ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class WorkPartition:
    """Per-worker lists of half-open entity ranges."""

    worker_count: int
    num_entities: int
    assignments: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {self.worker_count}")
        if len(self.assignments) != self.worker_count:
            raise ValueError("one assignment list per worker is required")
        covered = sorted(r for ranges in self.assignments for r in ranges if r[1] > r[0])
        cursor = 0
        for lo, hi in covered:
            if lo != cursor:
                raise ValueError(f"ranges leave a gap or overlap at entity {cursor}")
            cursor = hi
        if cursor != self.num_entities:
            raise ValueError(f"ranges cover {cursor} of {self.num_entities} entities")


def _cut(lo: int, hi: int, parts: int, weights: Optional[np.ndarray]) -> list[tuple[int, int]]:
    if parts <= 1 or hi <= lo:
        return [(lo, hi)] + [(hi, hi)] * max(parts - 1, 0)
    if weights is None:
        bounds = [lo + (hi - lo) * k // parts for k in range(parts + 1)]
    else:
        # +1 per entity keeps empty-adjacency runs from collapsing into one worker
        cum = np.cumsum(weights[lo:hi] + 1)
        targets = cum[-1] * np.arange(1, parts) / parts
        inner = (lo + np.searchsorted(cum, targets, side="left") + 1).tolist()
        bounds = [lo] + [min(max(b, lo), hi) for b in inner] + [hi]
        for k in range(1, len(bounds)):
            bounds[k] = max(bounds[k], bounds[k - 1])
    return [(bounds[k], bounds[k + 1]) for k in range(parts)]


def make_partition(
    num_users: int,
    num_items: int,
    worker_count: int,
    balanced: bool = False,
    degree: Optional[np.ndarray] = None,
) -> WorkPartition:
    """
    Static contiguous partition of the entity sequence.

    worker_count == 1 gets both sides. Otherwise ceil(w/2) workers split the
    user range and floor(w/2) split the item range, equally by entity count or,
    with ``balanced``, equally by rating count (``degree`` per entity).
    """
    if worker_count < 1:
        raise ConfigError(f"worker_count must be >= 1, got {worker_count}")
    total = num_users + num_items
    weights = None
    if balanced:
        if degree is None or len(degree) != total:
            raise ValueError("balanced partitioning needs a degree per entity")
        weights = np.asarray(degree, dtype=np.int64)

    if worker_count == 1:
        assignments = (((0, num_users), (num_users, total)),)
    else:
        item_workers = worker_count // 2
        user_workers = worker_count - item_workers
        user_ranges = _cut(0, num_users, user_workers, weights)
        item_ranges = _cut(num_users, total, item_workers, weights)
        assignments = tuple((r,) for r in user_ranges + item_ranges)
    return WorkPartition(worker_count, total, assignments)


def _tiles(lo: int, hi: int, indptr: Optional[np.ndarray], max_nnz: int, max_entities: int) -> Iterable[tuple[int, int]]:
    start = lo
    while start < hi:
        stop = min(hi, start + max_entities)
        if indptr is not None:
            limit = int(np.searchsorted(indptr, indptr[start] + max_nnz, side="right")) - 1
            stop = min(stop, max(limit, start + 1))
        yield start, stop
        start = stop


# ── Worker pool ───────────────────────────────────────────────────────────────

class WorkerPool:
    """
    Long-lived thread pool bound to one partition of one dataset's entities.

    Create it once per training run (``with WorkerPool(...) as pool``); every
    phase of every epoch reuses the same threads.
    """

    def __init__(
        self,
        partition: WorkPartition,
        indptr: Optional[np.ndarray] = None,
        tile_nnz: int = DEFAULT_TILE_NNZ,
        tile_entities: int = DEFAULT_TILE_ENTITIES,
        eval_chunk: int = DEFAULT_EVAL_CHUNK,
    ):
        self.partition = partition
        self.indptr = indptr
        self.tile_nnz = tile_nnz
        self.tile_entities = tile_entities
        # entries per partial sum in loss/metric reductions run on this pool
        self.eval_chunk = eval_chunk
        self.last_worker_seconds: list[float] = []
        self._executor: Optional[ThreadPoolExecutor] = None
        if partition.worker_count > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=partition.worker_count, thread_name_prefix="minihes-worker"
            )

    @classmethod
    def for_dataset(
        cls,
        data: HdiDataset,
        worker_count: int,
        balanced: bool = False,
        eval_chunk: int = DEFAULT_EVAL_CHUNK,
    ) -> "WorkerPool":
        graph = data.entity_graph
        partition = make_partition(
            data.num_users, data.num_items, worker_count, balanced, graph.degree
        )
        return cls(partition, graph.indptr, eval_chunk=eval_chunk)

    @classmethod
    def sequential(cls, data: HdiDataset) -> "WorkerPool":
        return cls.for_dataset(data, 1)

    @property
    def worker_count(self) -> int:
        return self.partition.worker_count

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ── Block phase ──────────────────────────────────────────────────────────

    def _work(self, worker: int, task: BlockTask, out: np.ndarray) -> float:
        began = time.perf_counter()
        for lo, hi in self.partition.assignments[worker]:
            for tlo, thi in _tiles(lo, hi, self.indptr, self.tile_nnz, self.tile_entities):
                try:
                    out[tlo:thi] = task(tlo, thi)
                except (BlockTaskError, NonFiniteError):
                    raise
                except Exception as exc:
                    entity = getattr(exc, "entity", None)
                    raise BlockTaskError(tlo if entity is None else entity, exc) from exc
        return time.perf_counter() - began

    def run_blocks(self, task: BlockTask, width: int) -> np.ndarray:
        """
        Run ``task`` over every entity exactly once and assemble the rows.

        Returns an array of shape (num_entities, width). A failing tile is
        re-raised as BlockTaskError naming the entity (NonFiniteError passes
        through unchanged); when several workers fail, the lowest worker
        index wins.
        """
        out = np.empty((self.partition.num_entities, width), dtype=np.float64)
        workers = range(self.partition.worker_count)
        if self._executor is None:
            self.last_worker_seconds = [self._work(w, task, out) for w in workers]
        else:
            futures = [self._executor.submit(self._work, w, task, out) for w in workers]
            # wait for all before raising so no worker is still writing into ``out``
            errors = [f.exception() for f in futures]
            for err in errors:
                if err is not None:
                    raise err
            self.last_worker_seconds = [f.result() for f in futures]
        return out

    # ── Ordered map (entry-range reductions) ─────────────────────────────────

    def map_ordered(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self._executor is None:
            return [fn(x) for x in items]
        return list(self._executor.map(fn, items))


def run_blocks(
    partition: WorkPartition,
    block_task: BlockTask,
    width: int,
    indptr: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One-shot run_blocks with a temporary pool."""
    with WorkerPool(partition, indptr) as pool:
        return pool.run_blocks(block_task, width)


__all__ = [
    "BlockTask",
    "WorkPartition",
    "make_partition",
    "WorkerPool",
    "run_blocks",
]
