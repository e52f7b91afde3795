"""
suite.py — Oracle checks on randomized tiny instances.

Every check compares a production kernel against a dense or finite-difference
reference and records the worst error seen across all instances. A check
passes when that worst error is within its tolerance. The same seed always
produces the same instances and therefore the same error values.

``fault`` adds fault·v to every operator product the suite takes from the
production code. It exists so the failure path can be exercised end to end.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from minihes.cg_solver import CgSettings, solve_all, solve_block
from minihes.configuration import RuntimeSettings, derive_seed
from minihes.curvature import BlockOperatorContext, full_gnvp, gnvp_block, jvp_block
from minihes.data import HdiDataset, synthetic_low_rank
from minihes.errors import ConfigError, OracleCapExceeded
from minihes.factors import FactorState, gradient, loss, predict_entries
from minihes.schemas import CheckResult, VerificationReport
from minihes.verification.oracle import (
    block_diagonal,
    damping_diagonal,
    dense_gauss_newton,
    dense_hessian,
    dense_jacobian,
    fd_gradient,
    fd_hessian,
    hessian_offdiag_mass,
    max_relative_error,
)

logger = logging.getLogger(__name__)

LAMBDAS = (0.0, 0.02, 0.1)
GAMMAS = (0.0, 0.1, 1.0)
CG_DIMENSIONS = (2, 3, 5, 20)

TOLERANCES = {
    "gradient_fd": 1e-6,
    "hessian_fd": 1e-5,
    "hessian_symmetry": 0.0,
    "jvp_dense": 1e-12,
    "gnvp_dense": 1e-10,
    "gnvp_basis": 1e-10,
    "operator_symmetry": 1e-10,
    "operator_linearity": 1e-10,
    "operator_locality": 1e-10,
    "operator_pd": 1e-10,
    "gn_psd": 1e-10,
    "jt_residual": 1e-10,
    "cg_exact": 1e-8,
    "cg_descent": 0.0,
}

# absolute allowance under the relative checks; finite differences and
# cancellation leave noise near zero components
ABSOLUTE_ALLOWANCES = {
    "gradient_fd": 1e-7,
    "operator_linearity": 1e-12,
    "cg_exact": 1e-8,
}


def random_instance(
    rng: np.random.Generator,
    num_users: int,
    num_items: int,
    f: int,
    density: float = 0.5,
) -> tuple[FactorState, HdiDataset]:
    """Random observed cells (at least one), ratings U[1,5), factors U[-1,1)."""
    mask = rng.random((num_users, num_items)) < density
    if not mask.any():
        mask[rng.integers(num_users), rng.integers(num_items)] = True
    users, items = np.nonzero(mask)
    ratings = rng.uniform(1.0, 5.0, size=len(users))
    data = HdiDataset(users, items, ratings, num_users, num_items)
    values = rng.uniform(-1.0, 1.0, size=(num_users + num_items) * f)
    return FactorState(f, num_users, num_items, values), data


class _Worst:
    """Running maximum error per check."""

    def __init__(self) -> None:
        self.errors: dict[str, float] = {name: 0.0 for name in TOLERANCES}
        self.failed: set[str] = set()

    def record(self, name: str, error: float) -> None:
        if not np.isfinite(error):
            self.failed.add(name)
        self.errors[name] = max(self.errors[name], float(error))

    def fail(self, name: str) -> None:
        self.failed.add(name)

    def results(self) -> list[CheckResult]:
        out = []
        for name, tol in TOLERANCES.items():
            err = self.errors[name]
            passed = name not in self.failed and err <= tol
            out.append(CheckResult(name=name, max_error=err, tolerance=tol, passed=passed))
        return out


# ── Individual checks ─────────────────────────────────────────────────────────

def _with_values(state: FactorState, x: np.ndarray) -> FactorState:
    return FactorState(state.f, state.num_users, state.num_items, np.array(x, dtype=np.float64))


def _check_derivatives(worst: _Worst, state: FactorState, data: HdiDataset, lam: float) -> None:
    analytic = gradient(state, data, lam)
    numeric = fd_gradient(lambda x: loss(_with_values(state, x), data, lam), state.values)
    worst.record("gradient_fd", max_relative_error(analytic, numeric, ABSOLUTE_ALLOWANCES["gradient_fd"]))

    hess = dense_hessian(state, data, lam)
    worst.record("hessian_symmetry", float(np.max(np.abs(hess - hess.T))))
    numeric_hess = fd_hessian(lambda x: gradient(_with_values(state, x), data, lam), state.values)
    worst.record("hessian_fd", float(np.max(np.abs(hess - numeric_hess))))

    # Jᵀ(M − r) is the λ=0 gradient
    jac = dense_jacobian(state, data)
    residual = predict_entries(state, data) - data.ratings
    worst.record("jt_residual", float(np.max(np.abs(jac.T @ residual - gradient(state, data, 0.0)))))

    gn = dense_gauss_newton(state, data)
    smallest = float(scipy.linalg.eigvalsh(gn)[0])
    worst.record("gn_psd", max(0.0, -smallest))


def _neighbour_order(data: HdiDataset, state: FactorState, entity: int) -> np.ndarray:
    """Entry positions touching ``entity`` in sorted-adjacency order."""
    if entity < state.num_users:
        positions = np.flatnonzero(data.users == entity)
        return positions[np.argsort(data.items[positions], kind="stable")]
    positions = np.flatnonzero(data.items == entity - state.num_users)
    return positions[np.argsort(data.users[positions], kind="stable")]


def _check_products(
    worst: _Worst,
    rng: np.random.Generator,
    state: FactorState,
    data: HdiDataset,
    lam: float,
    operator: Callable[[BlockOperatorContext, int, np.ndarray], np.ndarray],
    full_operator: Callable[[BlockOperatorContext, np.ndarray], np.ndarray],
) -> None:
    f = state.f
    jac = dense_jacobian(state, data)
    gn = jac.T @ jac
    for gamma in GAMMAS:
        ctx = BlockOperatorContext(state, data, lam, gamma)
        damping = damping_diagonal(state, data, lam, gamma)
        for entity in range(state.num_entities):
            block = slice(entity * f, (entity + 1) * f)
            v = rng.standard_normal(f)

            if gamma == GAMMAS[0]:
                v_full = np.zeros(state.values.size)
                v_full[block] = v
                expected_jv = (jac @ v_full)[_neighbour_order(data, state, entity)]
                worst.record("jvp_dense", float(np.max(np.abs(jvp_block(ctx, entity, v) - expected_jv), initial=0.0)))

            expected = gn[block, block] @ v + damping[block] * v
            worst.record("gnvp_dense", float(np.max(np.abs(operator(ctx, entity, v) - expected))))

        # one product per basis vector; the columns rebuild the damped block-diagonal GN matrix
        n = state.values.size
        columns = np.empty((n, n))
        for k in range(n):
            basis = np.zeros(n)
            basis[k] = 1.0
            columns[:, k] = full_operator(ctx, basis)
        expected_matrix = block_diagonal(gn, f) + np.diag(damping)
        worst.record("gnvp_basis", float(np.max(np.abs(columns - expected_matrix))))


def _check_operator_properties(
    worst: _Worst,
    rng: np.random.Generator,
    state: FactorState,
    data: HdiDataset,
    lam: float,
    gamma: float,
    samples: int,
    full_operator: Callable[[BlockOperatorContext, np.ndarray], np.ndarray],
) -> None:
    ctx = BlockOperatorContext(state, data, lam, gamma)
    n, f = state.values.size, state.f
    for _ in range(samples):
        v = rng.standard_normal(n)
        w = rng.standard_normal(n)
        av = full_operator(ctx, v)
        aw = full_operator(ctx, w)

        left, right = float(w @ av), float(v @ aw)
        worst.record("operator_symmetry", abs(left - right) / max(1.0, abs(left), abs(right)))

        a, b = rng.standard_normal(2)
        combined = full_operator(ctx, a * v + b * w)
        linearity = max_relative_error(combined, a * av + b * aw, ABSOLUTE_ALLOWANCES["operator_linearity"])
        worst.record("operator_linearity", linearity)

        entity = int(rng.integers(state.num_entities))
        block = slice(entity * f, (entity + 1) * f)
        moved = v.copy()
        moved[block] += rng.standard_normal(f)
        change = full_operator(ctx, moved) - av
        change[block] = 0.0
        worst.record("operator_locality", float(np.max(np.abs(change))))

        vv = float(v @ v)
        margin = float(v @ av) - gamma * vv
        worst.record("operator_pd", max(0.0, -margin) / max(1.0, vv))


def _check_cg(worst: _Worst, rng: np.random.Generator, lam: float) -> None:
    exact = CgSettings(tau=0.0)
    for f in CG_DIMENSIONS:
        state, data = random_instance(rng, 2, 3, f, density=0.7)
        ctx = BlockOperatorContext(state, data, lam, 1.0)
        gn = dense_gauss_newton(state, data)
        damping = damping_diagonal(state, data, lam, 1.0)
        for entity in range(state.num_entities):
            block = slice(entity * f, (entity + 1) * f)
            system = gn[block, block] + np.diag(damping[block])
            rhs = rng.standard_normal(f)
            direct = scipy.linalg.solve(system, rhs, assume_a="pos")
            delta, _, _ = solve_block(ctx, entity, rhs, exact)
            worst.record("cg_exact", max_relative_error(delta, direct, ABSOLUTE_ALLOWANCES["cg_exact"]))

        grad = gradient(state, data, lam)
        delta = solve_all(ctx, grad, CgSettings(tau=0.1))
        rows_delta = delta.reshape(-1, f)
        rows_rhs = -grad.reshape(-1, f)
        for d, r in zip(rows_delta, rows_rhs):
            if np.any(r != 0.0):
                inner = float(d @ r)
                if not inner > 0.0:
                    worst.fail("cg_descent")
                    worst.record("cg_descent", -inner)


# ── Suite ─────────────────────────────────────────────────────────────────────

def run_verification(
    num_users: int = 4,
    num_items: int = 6,
    f: int = 3,
    instances: int = 20,
    seed: int = 0,
    samples: int = 100,
    fault: float = 0.0,
    dominance: bool = False,
    cap: Optional[int] = None,
) -> VerificationReport:
    """
    Run every oracle check and return the per-check worst errors.

    Instances cycle λ through 0, 0.02 and 0.1. ``samples`` operator-property
    checks are spread over the instances (at least one per instance).
    """
    cap = RuntimeSettings().oracle_cap if cap is None else cap
    if (num_users + num_items) * f > cap:
        raise OracleCapExceeded(
            f"instances need (|U|+|I|)·f = {(num_users + num_items) * f} > cap {cap}"
        )
    if instances < 1:
        raise ConfigError(f"instances must be >= 1, got {instances}")

    def operator(ctx: BlockOperatorContext, entity: int, v: np.ndarray) -> np.ndarray:
        return gnvp_block(ctx, entity, v) + fault * v

    def full_operator(ctx: BlockOperatorContext, v: np.ndarray) -> np.ndarray:
        return full_gnvp(ctx, v) + fault * v

    rng = np.random.default_rng(derive_seed(seed, "verify"))
    worst = _Worst()
    per_instance = -(-samples // instances)

    for k in range(instances):
        lam = LAMBDAS[k % len(LAMBDAS)]
        state, data = random_instance(rng, num_users, num_items, f)
        _check_derivatives(worst, state, data, lam)
        _check_products(worst, rng, state, data, lam, operator, full_operator)
        gamma = float(rng.uniform(0.1, 1.0))
        _check_operator_properties(worst, rng, state, data, lam, gamma, per_instance, full_operator)
        logger.debug("verification instance %d/%d done (lambda=%g)", k + 1, instances, lam)

    _check_cg(worst, rng, LAMBDAS[1])

    checks = worst.results()
    for check in checks:
        level = logging.INFO if check.passed else logging.ERROR
        logger.log(level, "%-20s max error %.3e (tolerance %.0e)", check.name, check.max_error, check.tolerance)

    trend = dominance_trend(seed=seed) if dominance else []
    return VerificationReport(seed=seed, instances=instances, checks=checks, dominance=trend)


def dominance_trend(
    num_users: int = 6,
    num_items: int = 8,
    f: int = 2,
    densities: Sequence[float] = (0.9, 0.7, 0.5, 0.3, 0.15),
    seed: int = 0,
    lam: float = 0.0,
) -> list[tuple[float, float]]:
    """
    (observed density, off-diagonal / block-diagonal Frobenius ratio) of the
    exact Hessian on synthetic data of fixed size and decreasing density.

    Diagnostic only; nothing is asserted about the trend.
    """
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    trend = []
    for density in densities:
        data = synthetic_low_rank(
            num_users, num_items, rank=f, density=density, seed=int(rng.integers(2**31))
        )
        values = rng.uniform(0.0, 1.0, size=(num_users + num_items) * f)
        state = FactorState(f, num_users, num_items, values)
        diag, offdiag = hessian_offdiag_mass(state, data, lam)
        ratio = offdiag / diag if diag > 0 else float("inf")
        logger.info("density %.3f: offdiag/diag = %.4f", data.density, ratio)
        trend.append((data.density, ratio))
    return trend


__all__ = ["random_instance", "run_verification", "dominance_trend", "TOLERANCES", "ABSOLUTE_ALLOWANCES"]
