"""
oracle.py — Dense brute-force references for verification only.

Every builder materialises an n×n (or |R_K|×n) matrix with n = (|U|+|I|)·f
and refuses to run when n exceeds the oracle cap (RuntimeSettings.oracle_cap,
default 200). Rows/columns follow the FactorState layout.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from minihes.configuration import RuntimeSettings
from minihes.data import HdiDataset
from minihes.errors import OracleCapExceeded
from minihes.factors import FactorState

# Dense oracles return plain 2-D float64 arrays (rows × cols, row-major).
DenseMatrix = np.ndarray


def _check_cap(state: FactorState, cap: Optional[int]) -> int:
    cap = RuntimeSettings().oracle_cap if cap is None else cap
    n = state.values.size
    if n > cap:
        raise OracleCapExceeded(
            f"dense oracle needs a {n}x{n} matrix; cap is {cap} ((|U|+|I|)·f)"
        )
    return n


def _blocks(state: FactorState, u: int, i: int) -> tuple[slice, slice]:
    f = state.f
    row_u = slice(u * f, (u + 1) * f)
    row_i = slice((state.num_users + i) * f, (state.num_users + i + 1) * f)
    return row_u, row_i


def dense_hessian(
    state: FactorState, data: HdiDataset, lam: float, cap: Optional[int] = None
) -> DenseMatrix:
    """
    Exact Hessian of the regularized loss, assembled entry by entry.

    Per observation (u, i, r) with p = x_u, q = x_i:
      user block  += q qᵀ + λI
      item block  += p pᵀ + λI
      coupling    ∂²L/∂p_a∂q_b = q_a p_b + δ_ab·(p·q − r), mirrored to keep H symmetric
    """
    n = _check_cap(state, cap)
    f = state.f
    rows = state.rows
    eye = np.eye(f)
    hess = np.zeros((n, n))
    for u, i, r in data.iter_entries():
        p = rows[u]
        q = rows[state.num_users + i]
        bu, bi = _blocks(state, u, i)
        hess[bu, bu] += np.outer(q, q) + lam * eye
        hess[bi, bi] += np.outer(p, p) + lam * eye
        coupling = np.outer(q, p) + (float(p @ q) - r) * eye
        hess[bu, bi] += coupling
        hess[bi, bu] += coupling.T
    return hess


def dense_jacobian(state: FactorState, data: HdiDataset, cap: Optional[int] = None) -> DenseMatrix:
    """|R_K| × n Jacobian of the predictions: row (u,i) holds x_i in u's columns, x_u in i's."""
    n = _check_cap(state, cap)
    rows = state.rows
    jac = np.zeros((len(data), n))
    for k, (u, i, _) in enumerate(data.iter_entries()):
        bu, bi = _blocks(state, u, i)
        jac[k, bu] = rows[state.num_users + i]
        jac[k, bi] = rows[u]
    return jac


def dense_gauss_newton(state: FactorState, data: HdiDataset, cap: Optional[int] = None) -> DenseMatrix:
    """Generalized Gauss-Newton matrix JᵀJ (positive semi-definite)."""
    jac = dense_jacobian(state, data, cap)
    return jac.T @ jac


def block_diagonal(matrix: DenseMatrix, f: int) -> DenseMatrix:
    """Keep only the f×f diagonal blocks."""
    out = np.zeros_like(matrix)
    for start in range(0, matrix.shape[0], f):
        block = slice(start, start + f)
        out[block, block] = matrix[block, block]
    return out


def damping_diagonal(state: FactorState, data: HdiDataset, lam: float, gamma: float) -> np.ndarray:
    """(γ + λ|R_Ke|) repeated f times per entity, in FactorState order."""
    degree = data.entity_graph.degree
    return np.repeat(gamma + lam * degree, state.f)


def hessian_offdiag_mass(
    state: FactorState, data: HdiDataset, lam: float, cap: Optional[int] = None
) -> tuple[float, float]:
    """Frobenius norms of (block-diagonal part, everything else) of the exact Hessian."""
    hess = dense_hessian(state, data, lam, cap)
    diag = block_diagonal(hess, state.f)
    return float(np.linalg.norm(diag)), float(np.linalg.norm(hess - diag))


# ── Finite differences ────────────────────────────────────────────────────────

def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for k in range(x.size):
        saved = x[k]
        x[k] = saved + step
        plus = fn(x)
        x[k] = saved - step
        minus = fn(x)
        x[k] = saved
        grad[k] = (plus - minus) / (2.0 * step)
    return grad


def fd_hessian(
    grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5
) -> DenseMatrix:
    """Central differences of a gradient, symmetrised."""
    x = np.array(x, dtype=np.float64)
    hess = np.empty((x.size, x.size))
    for k in range(x.size):
        saved = x[k]
        x[k] = saved + step
        plus = grad_fn(x)
        x[k] = saved - step
        minus = grad_fn(x)
        x[k] = saved
        hess[:, k] = (plus - minus) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def max_relative_error(
    actual: np.ndarray, expected: np.ndarray, atol: float = 0.0, floor: float = 1e-12
) -> float:
    """
    max_k max(|a_k − e_k| − atol, 0) / max(|a_k|, |e_k|, floor).

    A result ≤ rtol means |a_k − e_k| ≤ atol + rtol·max(|a_k|, |e_k|) for every
    k. With the default atol of 0 the measure is purely relative.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    excess = np.maximum(np.abs(actual - expected) - atol, 0.0)
    return float(np.max(excess / scale))


__all__ = [
    "DenseMatrix",
    "dense_hessian",
    "dense_jacobian",
    "dense_gauss_newton",
    "block_diagonal",
    "damping_diagonal",
    "hessian_offdiag_mass",
    "fd_gradient",
    "fd_hessian",
    "max_relative_error",
]
