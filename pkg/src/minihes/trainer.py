"""
trainer.py — Epoch loop with early stopping for Mini-Hes and the first-order baselines.

One epoch is a sequence of phases separated by barriers (each phase returns
only after every worker finished):

  1. gradient accumulation by entity block   (workers)
  2. update direction                         (workers for Mini-Hes CG, element-wise otherwise)
  3. X ← X + ΔX                               (master, exclusive)
  4. training loss and validation metrics     (workers over fixed entry chunks)

Mini-Hes runs phases 1-3 once for the user blocks and once more for the item
blocks unless ``block_order="joint"``.

Early stopping: the run stops once ``patience`` consecutive epochs fail to
improve strictly on the best validation metric. The returned state is the
best-validation snapshot, and test metrics are computed from it.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Optional, Protocol, Sequence

import numpy as np

from minihes.cg_solver import CgSettings, solve_all_with_stats
from minihes.configuration import RuntimeSettings, derive_seed
from minihes.curvature import BlockOperatorContext
from minihes.data import HdiDataset
from minihes.errors import ConfigError, NonFiniteError
from minihes.factors import FactorState, evaluate, gradient, init_factors, loss
from minihes.optimizers import make_step_rule
from minihes.parallel import WorkerPool
from minihes.schemas import EpochRecord, OptimizerConfig, TrainReport

logger = logging.getLogger(__name__)

GAMMA_MIN = 1e-8
GAMMA_MAX = 1e8

DEFAULT_LAMBDA_GRID = tuple(round(0.01 * k, 2) for k in range(11))


class _Update(Protocol):
    def apply(self, epoch: int, state: FactorState, pool: WorkerPool) -> dict: ...

    def observe_loss(self, value: float) -> None: ...


def _first_bad_entity(values: np.ndarray, f: int) -> Optional[int]:
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0] // f) if len(bad) else None


# ── Update rules ──────────────────────────────────────────────────────────────

class MiniHesUpdate:
    """
    ΔX from per-block CG on (J_eᵀJ_e + (γ + λ|R_Ke|)I) Δx_e = −∇_e L, unit step.

    With ``block_order="alternating"`` an epoch runs two half-steps: all user
    blocks against the current items, then all item blocks against the
    refreshed users, each on a freshly accumulated gradient. With the other
    side held fixed the loss is exactly quadratic in the side being solved, so
    every half-step lowers it. ``"joint"`` solves every block from one gradient
    and applies all increments together.
    """

    def __init__(self, config: OptimizerConfig, train: HdiDataset):
        self.config = config
        self.train = train
        self.gamma = config.gamma
        self.cg = CgSettings(tau=config.tau, max_iters=config.cg_max_iters)
        self._prev_delta: Optional[np.ndarray] = None
        self._prev_loss: Optional[float] = None

    def _sides(self, state: FactorState) -> tuple[tuple[int, int], ...]:
        if self.config.block_order == "joint":
            return ((0, state.num_entities),)
        return ((0, state.num_users), (state.num_users, state.num_entities))

    def _half_step(self, epoch: int, state: FactorState, pool: WorkerPool, lo: int, hi: int) -> int:
        f = state.f
        grad = gradient(state, self.train, self.config.lam, pool)
        entity = _first_bad_entity(grad, f)
        if entity is not None:
            raise NonFiniteError("gradient is not finite", epoch=epoch, entity=entity)
        if hi - lo < state.num_entities:
            # zero right-hand side: CG leaves the other side's rows at Δx = 0
            side = np.zeros_like(grad)
            side[lo * f : hi * f] = grad[lo * f : hi * f]
            grad = side

        ctx = BlockOperatorContext(state, self.train, self.config.lam, self.gamma)
        if self.config.warm_start and self._prev_delta is None:
            self._prev_delta = np.zeros_like(state.values)
        try:
            delta, stats = solve_all_with_stats(ctx, grad, self.cg, pool, x0=self._prev_delta)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.detail, epoch=epoch, entity=exc.entity) from exc
        state.values += delta
        if self._prev_delta is not None:
            self._prev_delta[lo * f : hi * f] = delta[lo * f : hi * f]
        return stats.total_iters

    def apply(self, epoch: int, state: FactorState, pool: WorkerPool) -> dict:
        total_iters = sum(self._half_step(epoch, state, pool, lo, hi) for lo, hi in self._sides(state))
        mean_iters = total_iters / state.num_entities if state.num_entities else 0.0
        return {"gamma": self.gamma, "cg_mean_iters": mean_iters}

    def observe_loss(self, value: float) -> None:
        if self.config.adaptive_gamma and self._prev_loss is not None:
            if value < self._prev_loss:
                self.gamma = max(self.gamma * 0.5, GAMMA_MIN)
            else:
                self.gamma = min(max(self.gamma, GAMMA_MIN) * 2.0, GAMMA_MAX)
        self._prev_loss = value


class FirstOrderUpdate:
    """Full-batch SGD / Adam / Yogi step on the same gradient."""

    def __init__(self, config: OptimizerConfig, train: HdiDataset):
        self.config = config
        self.train = train
        self.rule = make_step_rule(config)

    def apply(self, epoch: int, state: FactorState, pool: WorkerPool) -> dict:
        grad = gradient(state, self.train, self.config.lam, pool)
        entity = _first_bad_entity(grad, state.f)
        if entity is not None:
            raise NonFiniteError("gradient is not finite", epoch=epoch, entity=entity)
        self.rule.step(state.values, grad)
        return {}

    def observe_loss(self, value: float) -> None:
        pass


# ── Loop ──────────────────────────────────────────────────────────────────────

def _run(
    train: HdiDataset,
    val: HdiDataset,
    config: OptimizerConfig,
    update: _Update,
    test: Optional[HdiDataset],
    pool: Optional[WorkerPool],
    early_stopping: bool,
    state: Optional[FactorState],
) -> tuple[FactorState, TrainReport]:
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if len(val) == 0:
        raise ConfigError("validation set is empty")

    if state is None:
        state = init_factors(train.num_users, train.num_items, config.f, derive_seed(config.seed, "init"))
    owns_pool = pool is None
    if pool is None:
        pool = WorkerPool.for_dataset(
            train, config.threads, config.balanced_partition, RuntimeSettings().eval_chunk
        )

    records: list[EpochRecord] = []
    best_state = state.copy()
    best_metric = math.inf
    best_epoch = 0
    stopped_early = False
    started = time.perf_counter()

    try:
        if config.optimizer == "mini_hes" and config.adaptive_gamma:
            update.observe_loss(loss(state, train, config.lam, pool))

        for epoch in range(1, config.max_epochs + 1):
            epoch_start = time.perf_counter()
            extras = update.apply(epoch, state, pool)

            train_loss = loss(state, train, config.lam, pool)
            if not math.isfinite(train_loss):
                raise NonFiniteError(
                    "training loss is not finite",
                    epoch=epoch,
                    entity=_first_bad_entity(state.values, state.f),
                )
            update.observe_loss(train_loss)
            val_rmse, val_mae = evaluate(state, val, pool)
            metric = val_rmse if config.eval_metric == "rmse" else val_mae
            seconds = time.perf_counter() - epoch_start

            records.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=train_loss,
                    val_rmse=val_rmse,
                    val_mae=val_mae,
                    val_metric=metric,
                    seconds=seconds,
                    **extras,
                )
            )
            logger.info(
                "%s epoch %d: loss=%.6g val_%s=%.6f (%.3fs)",
                config.optimizer, epoch, train_loss, config.eval_metric, metric, seconds,
            )

            if metric < best_metric:
                best_metric, best_epoch = metric, epoch
                best_state = state.copy()
            elif early_stopping and epoch - best_epoch >= config.patience:
                stopped_early = True
                logger.info(
                    "early stop at epoch %d; best epoch %d (%s=%.6f)",
                    epoch, best_epoch, config.eval_metric, best_metric,
                )
                break
    finally:
        if owns_pool:
            pool.close()

    report = TrainReport(
        optimizer=config.optimizer,
        config=config,
        epochs=records,
        best_epoch=best_epoch,
        best_validation=best_metric,
        total_seconds=time.perf_counter() - started,
        epochs_run=len(records),
        stopped_early=stopped_early,
    )
    if test is not None:
        report = attach_test_metrics(report, best_state, test)
    return best_state, report


def attach_test_metrics(report: TrainReport, state: FactorState, test: HdiDataset) -> TrainReport:
    test_rmse, test_mae = evaluate(state, test)
    logger.info("test rmse=%.6f mae=%.6f (best epoch %d)", test_rmse, test_mae, report.best_epoch)
    return report.model_copy(update={"test_rmse": test_rmse, "test_mae": test_mae})


def train_mini_hes(
    train: HdiDataset,
    val: HdiDataset,
    config: OptimizerConfig,
    test: Optional[HdiDataset] = None,
    pool: Optional[WorkerPool] = None,
    early_stopping: bool = True,
    state: Optional[FactorState] = None,
) -> tuple[FactorState, TrainReport]:
    if config.optimizer != "mini_hes":
        raise ConfigError(f"train_mini_hes called with optimizer {config.optimizer!r}")
    return _run(train, val, config, MiniHesUpdate(config, train), test, pool, early_stopping, state)


def train_first_order(
    train: HdiDataset,
    val: HdiDataset,
    config: OptimizerConfig,
    test: Optional[HdiDataset] = None,
    pool: Optional[WorkerPool] = None,
    early_stopping: bool = True,
    state: Optional[FactorState] = None,
) -> tuple[FactorState, TrainReport]:
    if config.optimizer == "mini_hes":
        raise ConfigError("train_first_order needs sgd, adam or yogi")
    return _run(train, val, config, FirstOrderUpdate(config, train), test, pool, early_stopping, state)


def train(
    train: HdiDataset,
    val: HdiDataset,
    config: OptimizerConfig,
    test: Optional[HdiDataset] = None,
    pool: Optional[WorkerPool] = None,
    early_stopping: bool = True,
) -> tuple[FactorState, TrainReport]:
    """Dispatch on ``config.optimizer``."""
    runner = train_mini_hes if config.optimizer == "mini_hes" else train_first_order
    return runner(train, val, config, test=test, pool=pool, early_stopping=early_stopping)



def grid_search(
    train: HdiDataset,
    val: HdiDataset,
    base: OptimizerConfig,
    lambdas: Sequence[float] = DEFAULT_LAMBDA_GRID,
    taus: Optional[Sequence[float]] = None,
    test: Optional[HdiDataset] = None,
    pool: Optional[WorkerPool] = None,
) -> tuple[FactorState, TrainReport, list[dict]]:
    """
    Train once per (λ, τ) pair and keep the run with the best validation metric.

    τ only varies for Mini-Hes; first-order runs use ``base.tau``. Returns the
    best state and report plus one summary row per run, in grid order.
    """
    if not lambdas:
        raise ConfigError("lambda grid is empty")
    taus = list(taus or [base.tau]) if base.optimizer == "mini_hes" else [base.tau]
    runner = train_mini_hes if base.optimizer == "mini_hes" else train_first_order
    owns_pool = pool is None
    if pool is None:
        pool = WorkerPool.for_dataset(
            train, base.threads, base.balanced_partition, RuntimeSettings().eval_chunk
        )

    best: Optional[tuple[FactorState, TrainReport]] = None
    rows: list[dict] = []
    try:
        for lam in lambdas:
            for tau in taus:
                config = OptimizerConfig.model_validate({**base.model_dump(), "lam": lam, "tau": tau})
                state, report = runner(train, val, config, test=test, pool=pool)
                rows.append({
                    "lambda": lam,
                    "tau": tau,
                    "best_epoch": report.best_epoch,
                    "best_validation": report.best_validation,
                    "test_rmse": report.test_rmse,
                    "test_mae": report.test_mae,
                    "epochs_run": report.epochs_run,
                    "seconds": report.total_seconds,
                })
                logger.info(
                    "grid %s lambda=%g tau=%g: val %s=%.6f",
                    base.optimizer, lam, tau, base.eval_metric, report.best_validation,
                )
                if best is None or report.best_validation < best[1].best_validation:
                    best = (state, report)
    finally:
        if owns_pool:
            pool.close()
    return best[0], best[1], rows


__all__ = [
    "MiniHesUpdate",
    "FirstOrderUpdate",
    "train",
    "train_mini_hes",
    "train_first_order",
    "attach_test_metrics",
    "grid_search",
    "DEFAULT_LAMBDA_GRID",
]
