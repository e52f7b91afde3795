"""
optimizers.py — Full-batch first-order step rules used as baselines.

Each rule owns its moment buffers and updates the parameter vector in place.
All arithmetic is element-wise, so results do not depend on the thread count
that produced the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from minihes.schemas import OptimizerConfig


class StepRule(Protocol):
    def step(self, params: np.ndarray, grad: np.ndarray) -> None: ...


@dataclass
class SgdStep:
    lr: float

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.lr:
            params -= self.lr * grad


@dataclass
class AdamStep:
    """Adam with bias-corrected moments."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def _second_moment(self, grad_sq: np.ndarray) -> None:
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad_sq

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self._second_moment(grad * grad)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class YogiStep(AdamStep):
    """Yogi: additive second-moment update v ← v − (1−β₂)·sign(v − g²)·g²."""

    def _second_moment(self, grad_sq: np.ndarray) -> None:
        self.v -= (1.0 - self.beta2) * np.sign(self.v - grad_sq) * grad_sq


def make_step_rule(config: OptimizerConfig) -> StepRule:
    if config.optimizer == "sgd":
        return SgdStep(config.lr)
    if config.optimizer == "adam":
        return AdamStep(config.lr, config.beta1, config.beta2, config.epsilon)
    if config.optimizer == "yogi":
        return YogiStep(config.lr, config.beta1, config.beta2, config.epsilon)
    raise ValueError(f"{config.optimizer!r} is not a first-order optimizer")


__all__ = ["StepRule", "SgdStep", "AdamStep", "YogiStep", "make_step_rule"]
