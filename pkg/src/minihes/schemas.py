from __future__ import annotations

import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ── Optimizer configuration ───────────────────────────────────────────────────

OptimizerName = Literal["mini_hes", "sgd", "adam", "yogi"]


class OptimizerConfig(BaseModel):
    """Every hyper-parameter of one training run; defaults follow the reference settings."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    optimizer: OptimizerName = Field(default="mini_hes", description="Update rule")
    f: int = Field(default=20, ge=1, description="Latent dimension")
    lam: float = Field(default=0.0, ge=0.0, alias="lambda", description="Tikhonov constant λ")

    # ── Mini-Hes only ─────────────────────────────────────────────────────────
    gamma: float = Field(default=1.0, ge=0.0, description="Damping γ added to every block")
    tau: float = Field(default=0.1, ge=0.0, description="CG relative residual tolerance")
    cg_max_iters: Optional[int] = Field(
        default=None, ge=1, description="CG iteration cap per block; unset means f"
    )
    adaptive_gamma: bool = Field(
        default=False, description="Halve γ after a loss decrease, double after an increase"
    )
    warm_start: bool = Field(
        default=False, description="Start CG from the previous epoch's increment"
    )
    block_order: Literal["alternating", "joint"] = Field(
        default="alternating",
        description="Solve user blocks then item blocks on refreshed gradients, or both at once",
    )

    # ── First-order only ──────────────────────────────────────────────────────
    lr: float = Field(default=0.01, ge=0.0, description="Learning rate η")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, ge=0.0)

    # ── Loop ──────────────────────────────────────────────────────────────────
    max_epochs: int = Field(default=500, ge=1)
    patience: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    balanced_partition: bool = Field(
        default=False, description="Split worker ranges by rating count instead of entity count"
    )
    eval_metric: Literal["rmse", "mae"] = "rmse"

    @field_validator("optimizer", mode="before")
    @classmethod
    def _normalise_optimizer(cls, value):
        if isinstance(value, str):
            return value.strip().lower().replace("-", "_")
        return value

    @field_validator("lam", "gamma", "tau", "lr", "epsilon")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("must be finite")
        return value

    def cg_iters(self) -> int:
        return self.cg_max_iters if self.cg_max_iters is not None else self.f


# ── Training report ───────────────────────────────────────────────────────────

class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_rmse: float
    val_mae: float
    val_metric: float
    seconds: float
    gamma: Optional[float] = None           # Mini-Hes damping used this epoch
    cg_mean_iters: Optional[float] = None   # Mini-Hes only


class TrainReport(BaseModel):
    """
    Per-epoch trace plus the best-validation summary.

    Test metrics are computed from the best snapshot, not the final epoch.
    """

    optimizer: OptimizerName
    config: OptimizerConfig
    epochs: list[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_validation: float = math.inf
    test_rmse: Optional[float] = None
    test_mae: Optional[float] = None
    total_seconds: float = 0.0
    epochs_run: int = 0
    stopped_early: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "TrainReport":
        if self.epochs_run != len(self.epochs):
            raise ValueError("epochs_run must equal the number of epoch records")
        if self.epochs_run > self.config.max_epochs:
            raise ValueError("epochs_run exceeds max_epochs")
        if self.epochs and self.best_validation != min(e.val_metric for e in self.epochs):
            raise ValueError("best_validation must be the minimum validation metric")
        return self

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


# ── Benchmark ─────────────────────────────────────────────────────────────────

class SpeedupRow(BaseModel):
    threads: int
    median_seconds: float
    std_seconds: float
    speedup: float
    seconds: list[float] = Field(description="Wall seconds of every repeat")
    worker_seconds: list[float] = Field(
        default_factory=list, description="Per-worker busy seconds of the last block phase"
    )


class SpeedupReport(BaseModel):
    dataset: str
    baseline_threads: int
    epochs: int
    repeats: int
    rows: list[SpeedupRow]
    timing_scope: str = "full epoch loop: gradient, CG solve, update, loss and validation"

    @model_validator(mode="after")
    def _baseline_is_one(self) -> "SpeedupReport":
        for row in self.rows:
            if row.threads == self.baseline_threads and row.speedup != 1.0:
                raise ValueError("baseline row must have speedup 1")
        return self


# ── Verification ──────────────────────────────────────────────────────────────

class CheckResult(BaseModel):
    name: str
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""


class VerificationReport(BaseModel):
    seed: int
    instances: int
    checks: list[CheckResult]
    dominance: list[tuple[float, float]] = Field(
        default_factory=list,
        description="(density, off-diagonal/diagonal Frobenius ratio) of the exact Hessian",
    )

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ── Run manifest ──────────────────────────────────────────────────────────────

class RunManifest(BaseModel):
    """Everything needed, together with the input files, to reproduce a command."""

    command: Literal["split", "train", "grid", "verify", "bench"]
    tool_version: str
    config: dict = Field(default_factory=dict, description="Resolved configuration")
    seed: int = 0
    derived_seeds: dict[str, int] = Field(default_factory=dict)
    dataset_checksums: dict[str, str] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)


__all__ = [
    "OptimizerName",
    "OptimizerConfig",
    "EpochRecord",
    "TrainReport",
    "SpeedupRow",
    "SpeedupReport",
    "CheckResult",
    "VerificationReport",
    "RunManifest",
]
