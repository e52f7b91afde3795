"""
test_cg_solver.py — Per-block conjugate gradient.
"""

import numpy as np
import pytest
import scipy.linalg

from minihes.cg_solver import CgSettings, solve_all, solve_all_with_stats, solve_block, solve_range
from minihes.curvature import BlockOperatorContext
from minihes.errors import ConfigError, NonFiniteError
from minihes.factors import FactorState, gradient
from minihes.parallel import WorkerPool
from minihes.verification import random_instance
from minihes.verification.oracle import damping_diagonal, dense_gauss_newton


def _explicit_block(ctx, entity):
    f = ctx.f
    block = slice(entity * f, (entity + 1) * f)
    gn = dense_gauss_newton(ctx.state, ctx.data)
    return gn[block, block] + np.diag(damping_diagonal(ctx.state, ctx.data, ctx.lam, ctx.gamma)[block])


# ── Settings ──────────────────────────────────────────────────────────────────

def test_settings_default_cap_is_f():
    assert CgSettings().iters_for(20) == 20
    assert CgSettings(max_iters=3).iters_for(20) == 3


@pytest.mark.parametrize("kwargs", [{"tau": -0.1}, {"tau": float("nan")}, {"max_iters": 0}])
def test_settings_validation(kwargs):
    with pytest.raises(ConfigError):
        CgSettings(**kwargs)


# ── solve_block ───────────────────────────────────────────────────────────────

def test_zero_rhs_returns_zero_without_iterating(problem):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.0, 1.0)
    delta, iters, residual = solve_block(ctx, 0, np.zeros(state.f), CgSettings())
    assert np.all(delta == 0.0)
    assert iters == 0
    assert residual == 0.0


def test_scaled_identity_solved_in_one_iteration(make_dataset):
    data = make_dataset([(0, 0, 1.0)], 2, 1)
    state = FactorState(3, 2, 1, np.full(9, 0.2))
    ctx = BlockOperatorContext(state, data, 0.0, 2.0)
    delta, iters, _ = solve_block(ctx, 1, np.array([4.0, 4.0, 4.0]), CgSettings(tau=0.0))
    np.testing.assert_allclose(delta, [2.0, 2.0, 2.0])
    assert iters == 1


@pytest.mark.parametrize("f", [2, 3, 5, 20])
def test_exact_solve_matches_direct_solve(f):
    rng = np.random.default_rng(f)
    state, data = random_instance(rng, 2, 3, f, density=0.8)
    ctx = BlockOperatorContext(state, data, 0.02, 1.0)
    settings = CgSettings(tau=0.0, max_iters=f)
    for entity in range(state.num_entities):
        rhs = rng.standard_normal(f)
        direct = scipy.linalg.solve(_explicit_block(ctx, entity), rhs, assume_a="pos")
        delta, iters, _ = solve_block(ctx, entity, rhs, settings)
        assert iters <= f
        np.testing.assert_allclose(delta, direct, atol=1e-8, rtol=0)


def test_descent_for_every_block(problem, rng):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.05, 0.5)
    for entity in range(state.num_entities):
        rhs = rng.standard_normal(state.f)
        delta, _, _ = solve_block(ctx, entity, rhs, CgSettings(tau=0.1))
        assert delta @ rhs > 0.0


def test_error_in_operator_norm_never_increases(problem, rng):
    state, data = problem
    f = state.f
    ctx = BlockOperatorContext(state, data, 0.02, 0.1)
    entity = int(np.argmax(data.entity_graph.degree))
    system = _explicit_block(ctx, entity)
    rhs = rng.standard_normal(f)
    solution = scipy.linalg.solve(system, rhs, assume_a="pos")

    trace = []
    solve_range(ctx, entity, entity + 1, rhs[None, :], CgSettings(tau=0.0), iterate_trace=trace)
    errors = [float((x[0] - solution) @ system @ (x[0] - solution)) for x in trace]
    initial = float(solution @ system @ solution)
    for before, after in zip([initial] + errors, errors):
        assert after <= before + 1e-12


def test_iteration_cap_is_respected(synthetic, rng):
    state = FactorState(5, synthetic.num_users, synthetic.num_items, rng.uniform(0, 1, size=synthetic.num_entities * 5))
    ctx = BlockOperatorContext(state, synthetic, 0.0, 0.1)
    rhs = rng.standard_normal((synthetic.num_entities, 5))
    result = solve_range(ctx, 0, synthetic.num_entities, rhs, CgSettings(tau=0.0, max_iters=2))
    assert result.iters.max() <= 2


def test_indefinite_block_raises_naming_the_entity(make_dataset):
    # entity 1 has no ratings and γ = 0, so its operator is the zero matrix
    data = make_dataset([(0, 0, 1.0)], 2, 1)
    ctx = BlockOperatorContext(FactorState(2, 2, 1, np.full(6, 0.5)), data, 0.0, 0.0)
    with pytest.raises(NonFiniteError) as exc_info:
        solve_block(ctx, 1, np.array([1.0, 1.0]), CgSettings())
    assert exc_info.value.entity == 1


# ── solve_all ─────────────────────────────────────────────────────────────────

def test_zero_gradient_gives_zero_increment(problem):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.0, 1.0)
    assert np.all(solve_all(ctx, np.zeros(state.values.size), CgSettings()) == 0.0)


def test_increment_is_a_descent_direction(problem):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.02, 1.0)
    grad = gradient(state, data, 0.02)
    delta = solve_all(ctx, grad, CgSettings(tau=0.1))
    assert delta @ (-grad) > 0.0


def test_solve_all_is_thread_count_invariant(synthetic, rng):
    state = FactorState(4, synthetic.num_users, synthetic.num_items, rng.uniform(0, 1, size=synthetic.num_entities * 4))
    ctx = BlockOperatorContext(state, synthetic, 0.01, 1.0)
    grad = gradient(state, synthetic, 0.01)
    reference = solve_all(ctx, grad, CgSettings())
    for workers in (2, 4, 8):
        with WorkerPool.for_dataset(synthetic, workers) as pool:
            assert np.array_equal(solve_all(ctx, grad, CgSettings(), pool), reference)


def test_stats_report_iterations(synthetic, rng):
    state = FactorState(4, synthetic.num_users, synthetic.num_items, rng.uniform(0, 1, size=synthetic.num_entities * 4))
    ctx = BlockOperatorContext(state, synthetic, 0.01, 0.01)
    grad = gradient(state, synthetic, 0.01)
    _, stats = solve_all_with_stats(ctx, grad, CgSettings(tau=0.0, max_iters=1))
    assert stats.max_iters == 1
    assert stats.total_iters == int(np.count_nonzero(np.any(grad.reshape(-1, 4) != 0.0, axis=1)))
    assert stats.capped > 0


def test_solve_all_rejects_length_mismatch(problem):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.0, 1.0)
    with pytest.raises(ValueError):
        solve_all(ctx, np.zeros(state.values.size - 1), CgSettings())


def test_warm_start_from_solution_stops_immediately(problem, rng):
    state, data = problem
    ctx = BlockOperatorContext(state, data, 0.02, 1.0)
    entity = 0
    rhs = rng.standard_normal(state.f)
    solution = scipy.linalg.solve(_explicit_block(ctx, entity), rhs, assume_a="pos")
    result = solve_range(ctx, entity, entity + 1, rhs[None, :], CgSettings(tau=1e-6), x0=solution[None, :])
    assert result.iters[0] == 0
    np.testing.assert_allclose(result.delta[0], solution)
