"""Prior-knowledge spans and the knowledge-guided penalty functionals.

The strong-transfer penalty is the p-norm distance from ``beta`` to the span
of the prior vectors; the weak-transfer penalty is the quadratic-form norm
``sqrt(beta' Psi_a beta)`` with ``Psi_a = I - theta theta' / (||theta||^2 + a)``
and ``a = 1/lambda``; the Mahalanobis variant measures the distance to the
span in the ``Lambda^{-1}`` geometry.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _convex

__all__ = [
    "PriorSpan",
    "PenaltyKind",
    "PenaltySpec",
    "PsiMatrix",
    "ContourCurve",
    "norm_index",
    "pnorm",
    "span_distance",
    "span_distance_p2_closed",
    "psi_norm",
    "mahalanobis_span_distance",
    "cholesky_spd",
    "penalty_contour",
]


def norm_index(p) -> float:
    """Normalize a norm index to one of ``1.0, 2.0, inf``."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "max"):
            return math.inf
        try:
            p = float(key)
        except ValueError:
            raise ValueError(f"unsupported norm index {p!r}") from None
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ValueError(f"norm index must be 1, 2 or inf, got {p!r}")
    return p


def pnorm(x, p) -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    if p == 1:
        return float(np.abs(x).sum())
    if p == 2:
        return float(np.linalg.norm(x))
    return float(np.abs(x).max())


def _as_vector(x, name="beta") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class PriorSpan:
    """Linear span of the prior coefficient vectors ``theta_1..theta_M``.

    Zero vectors are dropped (with a warning) because they do not change the
    span. ``M == 0`` means no prior knowledge.
    """

    thetas: np.ndarray
    d: int
    names: tuple = field(default=())

    def __init__(self, thetas: Sequence | np.ndarray = (), d: int | None = None,
                 names: Sequence[str] = ()):
        if isinstance(thetas, np.ndarray) and thetas.ndim == 2:
            cols = [thetas[:, j] for j in range(thetas.shape[1])]
            if d is None:
                d = thetas.shape[0]
        else:
            cols = [np.asarray(t, dtype=float) for t in thetas]
        if d is None:
            if not cols:
                raise ValueError("dimension d is required for an empty span")
            d = cols[0].shape[0]
        names = tuple(names) if names else tuple(f"theta{j + 1}" for j in range(len(cols)))
        if len(names) != len(cols):
            raise ValueError("one name per prior vector is required")
        kept, kept_names = [], []
        for name, col in zip(names, cols):
            col = _as_vector(col, name)
            if col.shape[0] != d:
                raise ValueError(f"{name} has dimension {col.shape[0]}, expected {d}")
            if not np.any(col):
                warnings.warn(f"prior vector {name} is zero and was dropped", stacklevel=2)
                continue
            kept.append(col)
            kept_names.append(name)
        mat = np.column_stack(kept) if kept else np.zeros((d, 0))
        mat.setflags(write=False)
        object.__setattr__(self, "thetas", mat)
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "names", tuple(kept_names))

    @classmethod
    def empty(cls, d: int) -> "PriorSpan":
        return cls((), d=d)

    @property
    def M(self) -> int:
        return self.thetas.shape[1]

    def rank(self) -> int:
        """Numerical rank with threshold ``max(d, M) * eps * sigma_max``."""
        if self.M == 0:
            return 0
        return int(np.linalg.matrix_rank(self.thetas))

    def basis(self) -> np.ndarray:
        """Orthonormal basis of the span, shape ``(d, rank)``."""
        if self.M == 0:
            return np.zeros((self.d, 0))
        u, s, _ = np.linalg.svd(self.thetas, full_matrices=False)
        return u[:, :self.rank()]

    def coefficients(self, vartheta) -> np.ndarray:
        """Span coefficients ``kappa`` with ``thetas @ kappa == vartheta``."""
        if self.M == 0:
            return np.zeros(0)
        return np.linalg.lstsq(self.thetas, vartheta, rcond=None)[0]


class PenaltyKind(str, enum.Enum):
    STRONG_PNORM = "strong_pnorm"
    WEAK_PSI = "weak_psi"
    STRONG_MAHALANOBIS = "strong_mahalanobis"


@dataclass(frozen=True)
class PenaltySpec:
    """Which penalty to apply and with what parameters."""

    kind: PenaltyKind
    delta: float
    p: float = 2.0
    lambda_inv: float | None = None
    Lambda: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PenaltyKind(self.kind))
        if not self.delta >= 0:
            raise ValueError("delta must be >= 0")
        if self.kind is PenaltyKind.STRONG_PNORM:
            object.__setattr__(self, "p", norm_index(self.p))
        elif self.kind is PenaltyKind.WEAK_PSI:
            if self.lambda_inv is None or not self.lambda_inv >= 0:
                raise ValueError("weak transfer needs lambda_inv >= 0")
        else:
            if self.Lambda is None:
                raise ValueError("Mahalanobis penalty needs Lambda")
            cholesky_spd(self.Lambda)

    def value(self, beta, span: PriorSpan) -> float:
        """Unweighted penalty at ``beta``."""
        if self.kind is PenaltyKind.STRONG_PNORM:
            return span_distance(beta, span, self.p)[0]
        if self.kind is PenaltyKind.WEAK_PSI:
            if span.M != 1:
                raise ValueError("weak transfer is defined for exactly one prior vector")
            return psi_norm(beta, span.thetas[:, 0], self.lambda_inv)
        return mahalanobis_span_distance(beta, span, self.Lambda)[0]


@dataclass(frozen=True)
class PsiMatrix:
    """``Psi_a = I - theta theta' / (||theta||^2 + a)`` kept in rank-one form."""

    theta: np.ndarray
    a: float

    def __post_init__(self):
        theta = _as_vector(self.theta, "theta")
        if not np.any(theta):
            raise ValueError("theta must be non-zero")
        if not self.a >= 0:
            raise ValueError("a must be >= 0")
        object.__setattr__(self, "theta", theta)

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    @property
    def unit(self) -> np.ndarray:
        return self.theta / np.linalg.norm(self.theta)

    @property
    def ratio(self) -> float:
        """Eigenvalue along ``theta``: ``a / (||theta||^2 + a)`` (1 when a is inf)."""
        if math.isinf(self.a):
            return 1.0
        t2 = float(self.theta @ self.theta)
        return self.a / (t2 + self.a)

    def matvec(self, v) -> np.ndarray:
        u = self.unit
        return v - (1.0 - self.ratio) * (u @ v) * u

    def toarray(self) -> np.ndarray:
        u = self.unit
        return np.eye(self.d) - (1.0 - self.ratio) * np.outer(u, u)

    def eigenvalues(self) -> np.ndarray:
        """Exact spectrum in ascending order."""
        ev = np.ones(self.d)
        ev[0] = self.ratio
        return np.sort(ev)

    def eigh(self):
        """Eigen-decomposition ``(evals, evecs)``; ``evecs[:, 0]`` is along theta."""
        u = self.unit
        # Householder reflector mapping e_1 to u gives an orthonormal completion.
        e1 = np.zeros(self.d)
        e1[0] = 1.0
        v = e1 - u if u[0] <= 0 else e1 + u
        H = np.eye(self.d) - 2.0 * np.outer(v, v) / (v @ v)
        if u[0] > 0:
            H = -H
        evals = np.ones(self.d)
        evals[0] = self.ratio
        return evals, H


def span_distance(beta, span: PriorSpan, p) -> tuple[float, np.ndarray]:
    """Distance ``min_k ||beta - sum_m k_m theta_m||_p`` and a minimizing ``k``.

    p = 2 uses the least-squares projection; p = 1 with a single prior vector
    is solved exactly over the breakpoints ``beta_j / theta_j``; other cases go
    through an LP. On flat minimizing segments the ``k`` closest to zero wins.
    """
    p = norm_index(p)
    beta = _as_vector(beta)
    if beta.shape[0] != span.d:
        raise ValueError(f"beta has dimension {beta.shape[0]}, span has {span.d}")
    if span.M == 0:
        return pnorm(beta, p), np.zeros(0)
    T = span.thetas
    if p == 2:
        kappa = np.linalg.lstsq(T, beta, rcond=None)[0]
        resid = beta - T @ kappa
    elif p == 1 and span.M == 1:
        kappa, resid = _l1_line_fit(beta, T[:, 0])
    else:
        kappa = _convex.lp_span_distance(beta, T, p)
        resid = beta - T @ kappa
        if pnorm(resid, p) > pnorm(beta, p):  # LP round-off; theta = 0 is feasible
            kappa, resid = np.zeros(span.M), beta
    return pnorm(resid, p), kappa


def _l1_line_fit(beta, theta):
    """Exact ``argmin_k sum_j |beta_j - k theta_j|`` (weighted median)."""
    nz = np.flatnonzero(theta)
    with np.errstate(over="ignore"):
        bps = beta[nz] / theta[nz]
    keep = np.isfinite(bps)  # subnormal theta_j carry no weight
    if not np.any(keep):
        return np.zeros(1), beta.copy()
    nz, bps = nz[keep], bps[keep]
    wts = np.abs(theta[nz])
    order = np.argsort(bps, kind="stable")
    bps, wts, idx = bps[order], wts[order], nz[order]
    total = wts.sum()
    # slope of the objective just right of breakpoint k
    slope = 2.0 * np.cumsum(wts) - total
    tie = 1e-12 * total
    k = int(np.searchsorted(slope, -tie, side="left"))
    k = min(k, bps.size - 1)
    flat = abs(slope[k]) <= tie and k + 1 < bps.size
    if flat:
        kappa = float(np.clip(0.0, bps[k], bps[k + 1]))
        hit = None
        if kappa == bps[k]:
            hit = idx[k]
        elif kappa == bps[k + 1]:
            hit = idx[k + 1]
    else:
        kappa = float(bps[k])
        hit = idx[k]
    resid = beta - kappa * theta
    if hit is not None:
        resid[hit] = 0.0
    return np.array([kappa]), resid


def span_distance_p2_closed(beta, theta) -> float:
    """``||beta - (beta'theta / ||theta||^2) theta||_2`` for a single prior."""
    beta = _as_vector(beta)
    theta = _as_vector(theta, "theta")
    if beta.shape != theta.shape:
        raise ValueError("beta and theta dimensions differ")
    t2 = float(theta @ theta)
    if t2 == 0.0:
        raise ValueError("theta must be non-zero")
    return float(np.linalg.norm(beta - (beta @ theta / t2) * theta))


def psi_norm(beta, theta, a) -> float:
    """``sqrt(beta' Psi_a beta)``; ``a = inf`` gives the plain 2-norm.

    Evaluated as ``||beta_perp||^2 + a/(||theta||^2+a) (u'beta)^2``, which is
    the closed form ``||beta||^2 - (beta'theta)^2/(||theta||^2+a)`` without
    the cancellation.
    """
    a = float(a)
    if not a >= 0:
        raise ValueError("a must be >= 0")
    beta = _as_vector(beta)
    psi = PsiMatrix(theta, a)
    if beta.shape[0] != psi.d:
        raise ValueError("beta and theta dimensions differ")
    u = psi.unit
    along = float(u @ beta)
    perp = beta - along * u
    return math.sqrt(float(perp @ perp) + psi.ratio * along * along)


def cholesky_spd(Lambda) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    Lam = np.asarray(Lambda, dtype=float)
    if Lam.ndim != 2 or Lam.shape[0] != Lam.shape[1]:
        raise ValueError("Lambda must be a square matrix")
    if not np.all(np.isfinite(Lam)):
        raise ValueError("Lambda contains non-finite entries")
    if not np.allclose(Lam, Lam.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(Lam).max())):
        raise ValueError("Lambda must be symmetric")
    try:
        return np.linalg.cholesky(Lam)
    except np.linalg.LinAlgError:
        raise ValueError("Lambda is not positive definite") from None


def mahalanobis_span_distance(beta, span: PriorSpan, Lambda) -> tuple[float, np.ndarray]:
    """``min_k ||beta - Theta k||_{Lambda^{-1}}`` and the minimizing ``k``."""
    beta = _as_vector(beta)
    if beta.shape[0] != span.d:
        raise ValueError(f"beta has dimension {beta.shape[0]}, span has {span.d}")
    L = cholesky_spd(Lambda)
    if L.shape[0] != span.d:
        raise ValueError("Lambda dimension does not match the span")
    from scipy.linalg import solve_triangular

    zb = solve_triangular(L, beta, lower=True)
    if span.M == 0:
        return float(np.linalg.norm(zb)), np.zeros(0)
    zT = solve_triangular(L, span.thetas, lower=True)
    kappa = np.linalg.lstsq(zT, zb, rcond=None)[0]
    return float(np.linalg.norm(zb - zT @ kappa)), kappa


@dataclass
class ContourCurve:
    """Level set of the weak-transfer penalty for one value of ``a``.

    ``polylines`` is a list of ``(n, 2)`` arrays; the ellipse/circle is one
    closed polyline, the strong-transfer limit (``a == 0``) is a pair of
    parallel segments, and a zero level is a single origin point.
    """

    a: float
    level: float
    polylines: list


def penalty_contour(theta, a_values, level: float, resolution: int = 361,
                    extent: float | None = None) -> list[ContourCurve]:
    """Points on ``{beta in R^2 : ||beta||_{Psi_a} = level}`` for each ``a``.

    For ``a > 0`` the set is an ellipse with half-axis ``level`` across
    ``theta`` and ``level * sqrt((||theta||^2 + a)/a)`` along it; ``a = inf``
    is the circle and ``a = 0`` degenerates to the lines
    ``||beta_perp||_2 = level``, clipped to ``|t| <= extent`` along ``theta``.
    """
    theta = _as_vector(theta, "theta")
    if theta.shape[0] != 2:
        raise ValueError("contours are only defined in two dimensions")
    if not level >= 0:
        raise ValueError("level must be >= 0")
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    u = theta / np.linalg.norm(theta)
    v = np.array([-u[1], u[0]])
    t2 = float(theta @ theta)
    curves = []
    for a in a_values:
        a = float(a)
        if not a >= 0:
            raise ValueError("a values must be >= 0")
        if level == 0:
            curves.append(ContourCurve(a, level, [np.zeros((1, 2))]))
            continue
        if a == 0:
            half = extent if extent is not None else 4.0 * level
            t = np.linspace(-half, half, resolution)
            lines = [np.outer(t, u) + sgn * level * v for sgn in (1.0, -1.0)]
            curves.append(ContourCurve(a, level, lines))
            continue
        major = level if math.isinf(a) else level * math.sqrt((t2 + a) / a)
        phi = np.linspace(0.0, 2.0 * math.pi, resolution)
        pts = np.outer(major * np.cos(phi), u) + np.outer(level * np.sin(phi), v)
        pts[-1] = pts[0]
        curves.append(ContourCurve(a, level, [pts]))
    return curves
