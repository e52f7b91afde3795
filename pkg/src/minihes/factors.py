"""
factors.py — Latent factor state X, predictions, regularized loss, gradient and metrics.

Layout: one flat float64 array of length (|U|+|I|)·f. User u owns segment
[u·f, (u+1)·f); item i owns [(|U|+i)·f, (|U|+i+1)·f). Viewed as a matrix
(``state.rows``) row u is p_u and row |U|+i is q_i.

Reductions whose order could depend on how work is split use fixed orders:
dot products accumulate over d ascending, per-entity sums follow the sorted
adjacency, and entry sums go through fixed-size chunks. Results are therefore
identical for any worker count.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from minihes.configuration import DEFAULT_EVAL_CHUNK
from minihes.data import HdiDataset
from minihes.errors import ConfigError
from minihes.parallel import WorkerPool

logger = logging.getLogger(__name__)

# Flat vector in FactorState layout: gradients, CG directions, increments, GNVP outputs.
BlockVector = np.ndarray

INIT_LOW = 0.0
INIT_HIGH = 0.04


# ── Factor state ──────────────────────────────────────────────────────────────

@dataclass(eq=False)
class FactorState:
    """The unified decision vector X = [P; Q]."""

    f: int
    num_users: int
    num_items: int
    values: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.num_users + self.num_items) * self.f
        if self.values.shape != (expected,):
            raise ValueError(
                f"factor vector has shape {self.values.shape}, expected ({expected},)"
            )

    @property
    def num_entities(self) -> int:
        return self.num_users + self.num_items

    @property
    def rows(self) -> np.ndarray:
        """(|U|+|I|, f) view; writes go through to ``values``."""
        return self.values.reshape(self.num_entities, self.f)

    @property
    def user_factors(self) -> np.ndarray:
        return self.rows[: self.num_users]

    @property
    def item_factors(self) -> np.ndarray:
        return self.rows[self.num_users :]

    def user_entity(self, u: int) -> int:
        return u

    def item_entity(self, i: int) -> int:
        return self.num_users + i

    def copy(self) -> "FactorState":
        return FactorState(self.f, self.num_users, self.num_items, self.values.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def zeros_like(self) -> BlockVector:
        return np.zeros_like(self.values)


def init_factors(num_users: int, num_items: int, f: int, seed: int) -> FactorState:
    """Every element i.i.d. U[0, 0.04) from a seeded generator."""
    if f < 1:
        raise ConfigError(f"latent dimension must be >= 1, got {f}")
    if num_users < 1 or num_items < 1:
        raise ConfigError(
            f"need at least one user and one item, got {num_users} users and {num_items} items"
        )
    rng = np.random.default_rng(seed)
    values = rng.uniform(INIT_LOW, INIT_HIGH, size=(num_users + num_items) * f)
    return FactorState(f, num_users, num_items, values)


# ── Fixed-order kernels ───────────────────────────────────────────────────────

def row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot products of two (n, f) arrays, accumulated over d ascending."""
    acc = a[:, 0] * b[:, 0]
    for d in range(1, a.shape[1]):
        acc += a[:, d] * b[:, d]
    return acc


def segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Sum consecutive row segments; segment k is values[indptr[k]:indptr[k+1]]."""
    n = len(indptr) - 1
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    nonempty = np.flatnonzero(np.diff(indptr))
    if len(nonempty):
        out[nonempty] = np.add.reduceat(values, indptr[nonempty], axis=0)
    return out


def _chunked_sum(
    fn: Callable[[int, int], float],
    n: int,
    pool: Optional[WorkerPool] = None,
    chunk: Optional[int] = None,
) -> float:
    if chunk is None:
        chunk = pool.eval_chunk if pool is not None else DEFAULT_EVAL_CHUNK
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if pool is not None:
        partials = pool.map_ordered(lambda b: fn(*b), bounds)
    else:
        partials = [fn(lo, hi) for lo, hi in bounds]
    total = 0.0
    for p in partials:
        total += p
    return total


# ── Prediction & metrics ──────────────────────────────────────────────────────

def predict(state: FactorState, u: int, i: int) -> float:
    """M_(u,i)(X) = Σ_d x_{u,d}·x_{i,d}."""
    if not 0 <= u < state.num_users:
        raise IndexError(f"user index {u} out of range [0, {state.num_users})")
    if not 0 <= i < state.num_items:
        raise IndexError(f"item index {i} out of range [0, {state.num_items})")
    rows = state.rows
    return float(row_dot(rows[u : u + 1], rows[state.num_users + i : state.num_users + i + 1])[0])


def predict_entries(
    state: FactorState, data: HdiDataset, lo: int = 0, hi: Optional[int] = None
) -> np.ndarray:
    """Predictions for data entries [lo, hi)."""
    hi = len(data) if hi is None else hi
    rows = state.rows
    return row_dot(rows[data.users[lo:hi]], rows[state.num_users + data.items[lo:hi]])


def _check_universe(state: FactorState, data: HdiDataset) -> None:
    if state.num_users != data.num_users or state.num_items != data.num_items:
        raise ValueError(
            f"factor state covers {state.num_users}x{state.num_items} entities, "
            f"dataset covers {data.num_users}x{data.num_items}"
        )


def loss(
    state: FactorState,
    data: HdiDataset,
    lam: float,
    pool: Optional[WorkerPool] = None,
    chunk: Optional[int] = None,
) -> float:
    """
    ½·Σ_{(u,i)∈R_K} [(r − M_(u,i))² + λ·Σ_d (x_{u,d}² + x_{i,d}²)].

    The penalty is paid once per observed entry, so entity e's factors are
    weighted by |R_Ke|.
    Entry sums run over ``chunk``-sized partials (default: the pool's
    ``eval_chunk``).
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    _check_universe(state, data)
    rows = state.rows

    def partial(lo: int, hi: int) -> float:
        pu = rows[data.users[lo:hi]]
        qi = rows[state.num_users + data.items[lo:hi]]
        err = data.ratings[lo:hi] - row_dot(pu, qi)
        term = err * err
        if lam:
            term = term + lam * (row_dot(pu, pu) + row_dot(qi, qi))
        return float(np.sum(term))

    return 0.5 * _chunked_sum(partial, len(data), pool, chunk)


def evaluate(
    state: FactorState,
    data: HdiDataset,
    pool: Optional[WorkerPool] = None,
    chunk: Optional[int] = None,
) -> tuple[float, float]:
    """(RMSE, MAE) over every entry of ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_universe(state, data)

    def sq(lo: int, hi: int) -> float:
        err = data.ratings[lo:hi] - predict_entries(state, data, lo, hi)
        return float(np.sum(err * err))

    def ab(lo: int, hi: int) -> float:
        return float(np.sum(np.abs(data.ratings[lo:hi] - predict_entries(state, data, lo, hi))))

    n = len(data)
    rmse = math.sqrt(_chunked_sum(sq, n, pool, chunk) / n)
    mae = _chunked_sum(ab, n, pool, chunk) / n
    return rmse, mae


# ── Gradient ──────────────────────────────────────────────────────────────────

def gradient_range(state: FactorState, data: HdiDataset, lam: float, lo: int, hi: int) -> np.ndarray:
    """
    Gradient rows for entities [lo, hi):

        ∂L/∂x_e = Σ_{n∈R_Ke} [−(r_n − x_e·x_n)·x_n] + λ·|R_Ke|·x_e
    """
    graph = data.entity_graph
    rows = state.rows
    start, stop = graph.indptr[lo], graph.indptr[hi]
    counts = graph.degree[lo:hi]
    local_indptr = graph.indptr[lo : hi + 1] - start
    owner = np.repeat(np.arange(hi - lo), counts)
    own = rows[lo:hi]
    neighbors = rows[graph.indices[start:stop]]
    err = graph.ratings[start:stop] - row_dot(own[owner], neighbors)
    out = -segment_sum(neighbors * err[:, None], local_indptr)
    if lam:
        out += (lam * counts)[:, None] * own
    return out


def gradient(
    state: FactorState,
    data: HdiDataset,
    lam: float,
    pool: Optional[WorkerPool] = None,
) -> BlockVector:
    """Full gradient of ``loss``; entities without observations get a zero block."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    _check_universe(state, data)
    pool = pool or WorkerPool.sequential(data)
    out = pool.run_blocks(lambda lo, hi: gradient_range(state, data, lam, lo, hi), state.f)
    return out.ravel()


# ── Snapshots ─────────────────────────────────────────────────────────────────
#
# magic b"MINIHES1" | <q num_users | <q num_items | <q f | <q seed | <f8 values...

SNAPSHOT_MAGIC = b"MINIHES1"
_HEADER = struct.Struct("<8sqqqq")


def save_factors(state: FactorState, path: str | Path, seed: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, state.num_users, state.num_items, state.f, seed))
        fh.write(state.values.astype("<f8").tobytes())


def load_factors(path: str | Path) -> tuple[FactorState, int]:
    """Read a snapshot; returns (state, seed)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated factor snapshot")
    magic, num_users, num_items, f, seed = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a minihes factor snapshot")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return FactorState(f, num_users, num_items, values), seed


__all__ = [
    "BlockVector",
    "FactorState",
    "init_factors",
    "row_dot",
    "segment_sum",
    "predict",
    "predict_entries",
    "loss",
    "evaluate",
    "gradient_range",
    "gradient",
    "save_factors",
    "load_factors",
]
