"""Log-spaced hyperparameter grids, validation-split selection and test metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .estimators import (
    FitResult,
    Loss,
    SolverConfig,
    Status,
    fit_classifier_strong,
    fit_linear_strong,
    fit_linear_weak,
    fit_mahalanobis,
)
from .losses import Dataset, Task
from .penalties import PriorSpan

__all__ = [
    "Grid",
    "make_log_grid",
    "FitSpec",
    "SelectionReport",
    "GridSearchError",
    "grid_search",
    "r2_score",
    "accuracy_score",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """``n`` log-spaced values from ``lo`` to ``hi`` inclusive."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (self.lo > 0 and math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("grid endpoints must be finite and lo > 0")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got lo={self.lo}, hi={self.hi}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("a grid needs n >= 2 points")

    @property
    def values(self) -> np.ndarray:
        v = np.geomspace(self.lo, self.hi, int(self.n))
        v[0], v[-1] = self.lo, self.hi
        return v

    def __iter__(self):
        return iter(self.values.tolist())

    def __len__(self):
        return int(self.n)


def make_log_grid(lo: float, hi: float, n: int) -> Grid:
    """Geometric progression from ``lo`` to ``hi`` with ``n`` points."""
    return Grid(float(lo), float(hi), int(n))


def r2_score(beta, test: Dataset) -> float:
    """Out-of-sample ``1 - SS_res / SS_tot`` around the test-set mean."""
    if test.task is not Task.REGRESSION:
        raise ValueError("r2_score needs a regression dataset")
    resid = test.y - test.X @ np.asarray(beta, dtype=float)
    centered = test.y - test.y.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        raise ValueError("test response has zero variance; R^2 is undefined")
    return 1.0 - float(resid @ resid) / ss_tot


def accuracy_score(beta, test: Dataset) -> float:
    """Fraction of samples with ``sign(beta'x) == y``, where ``sign(0) = +1``."""
    if test.task is not Task.CLASSIFICATION:
        raise ValueError("accuracy_score needs a classification dataset")
    pred = np.where(test.X @ np.asarray(beta, dtype=float) >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == test.y))


def score(beta, data: Dataset) -> float:
    return r2_score(beta, data) if data.task is Task.REGRESSION else accuracy_score(beta, data)


@dataclass(frozen=True)
class FitSpec:
    """Which estimator to fit; ``delta`` and ``lambda_inv`` come from the grid.

    kind is one of ``linear_strong``, ``linear_weak``, ``classifier_strong``
    or ``mahalanobis``. An empty ``span`` gives the vanilla (no prior) fit.
    """

    kind: str
    span: PriorSpan | None = None
    p: float | str = 2
    theta: np.ndarray | None = None
    Lambda: np.ndarray | None = None
    loss: Loss | str = Loss.SQRT_LINEAR
    cfg: SolverConfig = SolverConfig()

    def __post_init__(self):
        kinds = {"linear_strong", "linear_weak", "classifier_strong", "mahalanobis"}
        if self.kind not in kinds:
            raise ValueError(f"kind must be one of {sorted(kinds)}")
        if self.kind == "linear_weak" and self.theta is None:
            raise ValueError("the weak fit needs theta")
        if self.kind == "mahalanobis" and self.Lambda is None:
            raise ValueError("the Mahalanobis fit needs Lambda")

    @property
    def uses_lambda_inv(self) -> bool:
        return self.kind == "linear_weak"

    def _span(self, d):
        return self.span if self.span is not None else PriorSpan.empty(d)

    def fit(self, data: Dataset, delta: float, lambda_inv: float | None = None,
            init=None) -> FitResult:
        if self.kind == "linear_strong":
            return fit_linear_strong(data, self._span(data.d), self.p, delta, self.cfg, init)
        if self.kind == "linear_weak":
            if lambda_inv is None:
                raise ValueError("the weak fit needs lambda_inv")
            return fit_linear_weak(data, self.theta, lambda_inv, delta, self.cfg, init)
        if self.kind == "classifier_strong":
            return fit_classifier_strong(data, self._span(data.d), self.p, delta,
                                         self.loss, self.cfg, init)
        return fit_mahalanobis(data, self._span(data.d), self.Lambda, delta, self.loss,
                               self.cfg, init)


class GridSearchError(RuntimeError):
    """A fit failed at one grid point; ``params`` names it."""

    def __init__(self, params: dict, cause: Exception):
        self.params = dict(params)
        super().__init__(f"fit failed at {self.params}: {cause}")


@dataclass
class SelectionReport:
    best_params: dict
    best_score: float
    table: list  # [(params dict, score)], in evaluation order
    best_fit: FitResult | None = field(default=None, repr=False)
    n_unconverged: int = 0

    def to_dict(self) -> dict:
        out = {
            "best_params": dict(self.best_params),
            "best_score": float(self.best_score),
            "table": [{"params": dict(p), "score": float(s)} for p, s in self.table],
            "n_unconverged": int(self.n_unconverged),
        }
        if self.best_fit is not None:
            out["best_fit"] = self.best_fit.to_dict()
        return out


def _as_values(g) -> list:
    if isinstance(g, Grid):
        return g.values.tolist()
    vals = [float(v) for v in np.atleast_1d(np.asarray(g, dtype=float))]
    if not vals:
        raise ValueError("empty grid")
    return vals


def grid_search(train: Dataset, val: Dataset, spec: FitSpec,
                grids: Mapping[str, Grid | Sequence[float]],
                warm_start: bool = True) -> SelectionReport:
    """Fit on ``train`` at every grid point and keep the best score on ``val``.

    ``grids`` maps ``"delta"`` (and ``"lambda_inv"`` for the weak fit) to a
    :class:`Grid` or explicit values. Scores are R^2 for regression and
    accuracy for classification. Ties go to the smallest ``delta``, then the
    smallest ``lambda_inv``. Within a ``lambda_inv`` slice the ``delta`` sweep
    is warm-started from the previous solution.
    """
    if train.d != val.d:
        raise ValueError("train and validation data have different dimensions")
    if train.task is not val.task:
        raise ValueError("train and validation data have different tasks")
    if "delta" not in grids:
        raise ValueError("grids must contain 'delta'")
    unknown = set(grids) - {"delta", "lambda_inv"}
    if unknown:
        raise ValueError(f"unknown grid parameters: {sorted(unknown)}")
    deltas = sorted(_as_values(grids["delta"]))
    if spec.uses_lambda_inv:
        if "lambda_inv" not in grids:
            raise ValueError("the weak fit needs a 'lambda_inv' grid")
        lam_invs = sorted(_as_values(grids["lambda_inv"]))
    else:
        lam_invs = [None]

    table = []
    best = None
    unconverged = 0
    for li in lam_invs:
        prev = None
        for delta in deltas:
            params = {"delta": delta} if li is None else {"delta": delta, "lambda_inv": li}
            try:
                res = spec.fit(train, delta, li, init=prev if warm_start else None)
                sc = score(res.beta, val)
            except Exception as exc:  # noqa: BLE001 - re-raised with the grid point
                raise GridSearchError(params, exc) from exc
            if res.status is Status.MAX_ITER:
                unconverged += 1
                log.warning("fit at %s stopped at max_iter (kkt %.3g)", params, res.kkt_residual)
            prev = res
            table.append((params, sc))
            key = (-sc, delta, li if li is not None else 0.0)
            if best is None or key < best[0]:
                best = (key, params, sc, res)
    _, params, sc, res = best
    return SelectionReport(best_params=params, best_score=sc, table=table,
                           best_fit=res, n_unconverged=unconverged)
