"""Empirical losses: square-root MSE, logistic and hinge.

Models are homogeneous (``beta' x``, no intercept); append a constant column
to ``X`` if an intercept is wanted.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

__all__ = [
    "Task",
    "Dataset",
    "LossEval",
    "SMOOTH_GUARD",
    "mse_n",
    "sqrt_mse",
    "logistic_loss",
    "hinge_loss",
]

SMOOTH_GUARD = 1e-14


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class Dataset:
    """Design matrix ``X`` (N x d), response ``y`` and the task type."""

    X: np.ndarray
    y: np.ndarray
    task: Task = Task.REGRESSION

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        task = Task(self.task)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("y must be a vector with one entry per row of X")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need at least one sample and one covariate")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("data contains non-finite entries")
        if task is Task.CLASSIFICATION and not np.all(np.abs(y) == 1.0):
            raise ValueError("classification labels must be in {-1, +1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "task", task)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


class LossEval(NamedTuple):
    value: float
    grad: np.ndarray | None
    smooth: bool = True


def _check(beta, data: Dataset, task: Task) -> np.ndarray:
    if data.task is not task:
        raise ValueError(f"expected a {task.value} dataset, got {data.task.value}")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.d,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({data.d},)")
    return beta


def mse_n(beta, data: Dataset) -> float:
    """Mean of squared residuals ``(y_i - beta' x_i)^2``."""
    beta = _check(beta, data, Task.REGRESSION)
    r = data.y - data.X @ beta
    return float(r @ r) / data.N


def sqrt_mse(beta, data: Dataset, smooth_guard: float = SMOOTH_GUARD) -> LossEval:
    """Root mean squared error with its gradient.

    The gradient ``-X'(y - X beta) / (N sqrt(MSE))`` is returned only when
    ``MSE > smooth_guard``; otherwise ``grad`` is None and ``smooth`` False.
    """
    beta = _check(beta, data, Task.REGRESSION)
    r = data.y - data.X @ beta
    mse = float(r @ r) / data.N
    val = math.sqrt(mse)
    if mse <= smooth_guard:
        return LossEval(val, None, False)
    return LossEval(val, -(data.X.T @ r) / (data.N * val), True)


def logistic_value_grad(margins: np.ndarray):
    """Mean of ``log(1 + exp(-m))`` and the per-sample derivative weights."""
    val = float(np.logaddexp(0.0, -margins).mean())
    return val, -expit(-margins)


def logistic_loss(beta, data: Dataset) -> LossEval:
    """Mean logistic loss ``log(1 + exp(-y beta'x))`` and its gradient."""
    beta = _check(beta, data, Task.CLASSIFICATION)
    m = data.y * (data.X @ beta)
    val, dm = logistic_value_grad(m)
    return LossEval(val, data.X.T @ (dm * data.y) / data.N, True)


def hinge_loss(beta, data: Dataset) -> LossEval:
    """Mean hinge loss ``(1 - y beta'x)^+`` and a subgradient.

    Samples sitting exactly on the kink (margin 1) contribute zero.
    """
    beta = _check(beta, data, Task.CLASSIFICATION)
    m = data.y * (data.X @ beta)
    val = float(np.maximum(1.0 - m, 0.0).mean())
    active = m < 1.0
    g = -(data.X[active].T @ data.y[active]) / data.N
    return LossEval(val, g, not np.any(m == 1.0))
