"""
curvature.py — Per-block damped Gauss-Newton vector products.

For entity e with neighbour factor rows x_n (n ∈ R_Ke) the curvature block is

    A_e = J_eᵀ J_e + (γ + λ·|R_Ke|)·I,      (J_e)_n = x_nᵀ

applied matrix-free:  A_e v = Σ_n x_n·(x_n·v) + γ·v + λ·|R_Ke|·v.

Only the diagonal blocks are ever formed, so distinct entities are independent
and ranges of entities can be processed by different workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from minihes.data import Adjacency, HdiDataset
from minihes.errors import ConfigError
from minihes.factors import BlockVector, FactorState, row_dot, segment_sum
from minihes.parallel import WorkerPool


@dataclass(frozen=True, eq=False)
class BlockOperatorContext:
    state: FactorState
    data: HdiDataset
    lam: float
    gamma: float

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if (self.state.num_users, self.state.num_items) != (self.data.num_users, self.data.num_items):
            raise ValueError("factor state and dataset cover different entity universes")

    @property
    def f(self) -> int:
        return self.state.f

    @property
    def num_entities(self) -> int:
        return self.state.num_entities

    @cached_property
    def graph(self) -> Adjacency:
        return self.data.entity_graph

    def _check_entity(self, entity: int) -> None:
        if not 0 <= entity < self.num_entities:
            raise IndexError(f"entity {entity} out of range [0, {self.num_entities})")


class RangeOperator:
    """The block operators A_e for every entity e in [lo, hi), sharing one gather."""

    def __init__(self, ctx: BlockOperatorContext, lo: int, hi: int):
        graph = ctx.graph
        start, stop = graph.indptr[lo], graph.indptr[hi]
        self.lo, self.hi = lo, hi
        self.counts = graph.degree[lo:hi]
        self.local_indptr = graph.indptr[lo : hi + 1] - start
        self.owner = np.repeat(np.arange(hi - lo), self.counts)
        self.neighbors = ctx.state.rows[graph.indices[start:stop]]
        self.shift = (ctx.gamma + ctx.lam * self.counts)[:, None]

    def jvp(self, v_rows: np.ndarray) -> np.ndarray:
        """J_e v_e for every observation, in sorted-adjacency order."""
        if len(self.owner) == 0:
            return np.zeros(0)
        return row_dot(v_rows[self.owner], self.neighbors)

    def apply(self, v_rows: np.ndarray) -> np.ndarray:
        out = segment_sum(self.neighbors * self.jvp(v_rows)[:, None], self.local_indptr)
        out += self.shift * v_rows
        return out


def _as_block(ctx: BlockOperatorContext, v_block: np.ndarray) -> np.ndarray:
    v = np.asarray(v_block, dtype=np.float64).reshape(-1)
    if v.shape != (ctx.f,):
        raise ValueError(f"block vector has length {v.size}, expected {ctx.f}")
    return v[None, :]


# ── Per-block operations ──────────────────────────────────────────────────────

def jvp_block(ctx: BlockOperatorContext, entity: int, v_block: np.ndarray) -> np.ndarray:
    """
    Jacobian-vector product of one block.

    User u: [Σ_d v_{u,d}·x_{i,d} for i ∈ R_Ku]; item i: [Σ_d x_{u,d}·v_{i,d} for u ∈ R_Ki].
    """
    ctx._check_entity(entity)
    return RangeOperator(ctx, entity, entity + 1).jvp(_as_block(ctx, v_block))


def gnvp_block(ctx: BlockOperatorContext, entity: int, v_block: np.ndarray) -> np.ndarray:
    """(J_eᵀJ_e + (γ + λ|R_Ke|)·I)·v for one entity."""
    ctx._check_entity(entity)
    return RangeOperator(ctx, entity, entity + 1).apply(_as_block(ctx, v_block))[0]


def gnvp_range(ctx: BlockOperatorContext, lo: int, hi: int, v_rows: np.ndarray) -> np.ndarray:
    """Block products for entities [lo, hi); row k of ``v_rows`` belongs to entity lo+k."""
    return RangeOperator(ctx, lo, hi).apply(v_rows)


def full_gnvp(
    ctx: BlockOperatorContext,
    v: BlockVector,
    pool: Optional[WorkerPool] = None,
) -> BlockVector:
    """Block-diagonal product: every output block depends only on its own input block."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != ctx.state.values.shape:
        raise ValueError(
            f"vector has shape {v.shape}, expected {ctx.state.values.shape}"
        )
    v_rows = v.reshape(ctx.num_entities, ctx.f)
    pool = pool or WorkerPool.sequential(ctx.data)
    return pool.run_blocks(lambda lo, hi: gnvp_range(ctx, lo, hi, v_rows[lo:hi]), ctx.f).ravel()


__all__ = [
    "BlockOperatorContext",
    "RangeOperator",
    "jvp_block",
    "gnvp_block",
    "gnvp_range",
    "full_gnvp",
]
