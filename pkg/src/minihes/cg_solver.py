"""
cg_solver.py — Per-entity conjugate gradient on the damped Gauss-Newton blocks.

Each entity e solves  A_e·Δx_e = −∇_e L  with A_e from curvature.RangeOperator.
A range of entities is solved in lock-step: every numpy operation is
row-wise, each row keeps its own α, β, residual and stopping flag, and rows
that have stopped are frozen with masked updates. A row's iterates are
therefore identical whether it is solved alone or inside any range.

Stopping rule per entity: ‖r‖₂ ≤ τ·‖rhs‖₂, or ``max_iters`` iterations
(default f). A zero right-hand side returns Δx = 0 after 0 iterations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from minihes.curvature import BlockOperatorContext, RangeOperator
from minihes.errors import ConfigError, NonFiniteError
from minihes.factors import BlockVector, row_dot
from minihes.parallel import WorkerPool

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgSettings:
    tau: float = 0.1
    max_iters: Optional[int] = None  # None → f

    def __post_init__(self) -> None:
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise ConfigError(f"tau must be a finite value >= 0, got {self.tau}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")

    def iters_for(self, f: int) -> int:
        return self.max_iters if self.max_iters is not None else f


@dataclass(frozen=True)
class CgResult:
    """Outcome for entities [lo, hi): row k belongs to entity lo+k."""

    delta: np.ndarray
    iters: np.ndarray
    residual: np.ndarray


@dataclass(frozen=True)
class CgStats:
    total_iters: int
    mean_iters: float
    max_iters: int
    capped: int  # entities that stopped on the iteration cap with residual above tolerance


def solve_range(
    ctx: BlockOperatorContext,
    lo: int,
    hi: int,
    rhs_rows: np.ndarray,
    settings: CgSettings,
    x0: Optional[np.ndarray] = None,
    iterate_trace: Optional[list[np.ndarray]] = None,
) -> CgResult:
    """
    Solve every block system in [lo, hi) by CG from Δx₀ = 0 (or ``x0``).

    ``iterate_trace``, when given, receives the iterate after every step so
    tests can inspect convergence.
    """
    op = RangeOperator(ctx, lo, hi)
    b = np.asarray(rhs_rows, dtype=np.float64)
    b_norm = np.sqrt(row_dot(b, b))
    tol = settings.tau * b_norm
    cap = settings.iters_for(ctx.f)

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        r = b - op.apply(x)
    zero_rhs = b_norm == 0.0
    x[zero_rhs] = 0.0
    r[zero_rhs] = 0.0

    p = r.copy()
    rs = row_dot(r, r)
    iters = np.zeros(hi - lo, dtype=np.int64)
    active = np.sqrt(rs) > tol

    for _ in range(cap):
        if not active.any():
            break
        ap = op.apply(p)
        p_ap = row_dot(p, ap)
        bad = active & ~(p_ap > 0.0)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise NonFiniteError(
                f"CG curvature p·Ap = {p_ap[k]!r} is not positive; block operator is not SPD "
                f"(gamma = {ctx.gamma})",
                entity=lo + k,
            )
        alpha = np.where(active, rs / np.where(active, p_ap, 1.0), 0.0)
        step = active[:, None]
        x = np.where(step, x + alpha[:, None] * p, x)
        r = np.where(step, r - alpha[:, None] * ap, r)
        rs_new = row_dot(r, r)
        if not np.all(np.isfinite(rs_new[active])):
            k = int(np.flatnonzero(active & ~np.isfinite(rs_new))[0])
            raise NonFiniteError("CG residual became non-finite", entity=lo + k)
        beta = np.where(active, rs_new / np.where(active, rs, 1.0), 0.0)
        p = np.where(step, r + beta[:, None] * p, p)
        rs = np.where(active, rs_new, rs)
        iters += active
        active &= np.sqrt(rs) > tol
        if iterate_trace is not None:
            iterate_trace.append(x.copy())

    return CgResult(delta=x, iters=iters, residual=np.sqrt(rs))


def solve_block(
    ctx: BlockOperatorContext,
    entity: int,
    rhs: np.ndarray,
    settings: CgSettings,
) -> tuple[np.ndarray, int, float]:
    """(Δx, iterations, final ‖r‖₂) for one entity's block system."""
    ctx._check_entity(entity)
    rhs = np.asarray(rhs, dtype=np.float64).reshape(1, -1)
    if rhs.shape[1] != ctx.f:
        raise ValueError(f"rhs has length {rhs.shape[1]}, expected {ctx.f}")
    result = solve_range(ctx, entity, entity + 1, rhs, settings)
    return result.delta[0], int(result.iters[0]), float(result.residual[0])


def solve_all_with_stats(
    ctx: BlockOperatorContext,
    grad: BlockVector,
    settings: CgSettings,
    pool: Optional[WorkerPool] = None,
    x0: Optional[BlockVector] = None,
) -> tuple[BlockVector, CgStats]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != ctx.state.values.shape:
        raise ValueError(f"gradient has shape {grad.shape}, expected {ctx.state.values.shape}")
    f = ctx.f
    rhs_rows = -grad.reshape(ctx.num_entities, f)
    x0_rows = None if x0 is None else np.asarray(x0).reshape(ctx.num_entities, f)

    def task(lo: int, hi: int) -> np.ndarray:
        res = solve_range(
            ctx, lo, hi, rhs_rows[lo:hi], settings,
            None if x0_rows is None else x0_rows[lo:hi],
        )
        return np.column_stack([res.delta, res.iters, res.residual])

    pool = pool or WorkerPool.sequential(ctx.data)
    packed = pool.run_blocks(task, f + 2)
    delta = np.ascontiguousarray(packed[:, :f]).ravel()
    iters = packed[:, f].astype(np.int64)
    residual = packed[:, f + 1]

    cap = settings.iters_for(f)
    b_norm = np.sqrt(row_dot(rhs_rows, rhs_rows))
    stats = CgStats(
        total_iters=int(iters.sum()),
        mean_iters=float(iters.mean()) if len(iters) else 0.0,
        max_iters=int(iters.max()) if len(iters) else 0,
        capped=int(np.count_nonzero((iters >= cap) & (residual > settings.tau * b_norm))),
    )
    logger.debug(
        "cg: %d iterations total, mean %.2f, max %d, %d capped",
        stats.total_iters, stats.mean_iters, stats.max_iters, stats.capped,
    )
    return delta, stats


def solve_all(
    ctx: BlockOperatorContext,
    grad: BlockVector,
    settings: CgSettings,
    pool: Optional[WorkerPool] = None,
) -> BlockVector:
    """ΔX: every entity's block solved with rhs = −(gradient block)."""
    return solve_all_with_stats(ctx, grad, settings, pool)[0]


__all__ = [
    "CgSettings",
    "CgResult",
    "CgStats",
    "solve_range",
    "solve_block",
    "solve_all_with_stats",
    "solve_all",
]
