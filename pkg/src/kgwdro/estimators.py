"""Knowledge-guided WDRO estimators.

Every strong-transfer problem is solved in the split form ``beta = w + Theta k``
with the penalty acting on ``w`` only and ``k`` left free, which turns
``min_{beta, vartheta in Theta} loss(beta) + weight * ||beta - vartheta||``
into an ordinary partially-penalized problem. The smooth losses (square-root
MSE, logistic) are minimized with a monotone accelerated proximal gradient
method and certified by a KKT residual; the hinge loss is solved exactly as
an LP (p = 1, inf) or a second-order cone program (p = 2, Mahalanobis).
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.special import expit

from . import _convex
from .losses import SMOOTH_GUARD, Dataset, Task
from .penalties import PriorSpan, PsiMatrix, cholesky_spd, norm_index, pnorm

__all__ = [
    "Loss",
    "Status",
    "StepRule",
    "SolverConfig",
    "FitResult",
    "RankDeficiencyGuard",
    "Problem",
    "prox_pnorm",
    "kkt_residual",
    "fit_linear_strong",
    "fit_linear_weak",
    "fit_classifier_strong",
    "fit_mahalanobis",
    "fit_span_constrained",
]

log = logging.getLogger(__name__)


class RankDeficiencyGuard(ValueError):
    """Strong transfer with a prior span of full rank ``d``.

    The orthogonality constraints would then pin every perturbation to zero
    and the robust problem collapses to plain empirical risk minimization.
    """


class Loss(str, enum.Enum):
    SQRT_LINEAR = "sqrt_linear"
    LOGISTIC = "logistic"
    HINGE = "hinge"


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    PERFECT_FIT = "perfect_fit"


class StepRule(str, enum.Enum):
    BACKTRACKING = "backtracking"
    FIXED_DIMINISHING = "fixed_diminishing"


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 50_000
    tol: float = 1e-8
    step_rule: StepRule = StepRule.BACKTRACKING
    smooth_guard: float = SMOOTH_GUARD
    # stop early when the objective has not moved for this many iterations
    stall_iter: int = 2_000

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))


@dataclass
class FitResult:
    """Fitted coefficients with the certificate of the solve.

    ``objective`` is the value of the problem as stated: squared for the
    square-root linear fits, ``loss + delta * penalty`` for classifiers.
    ``trace`` holds the working (un-squared) objective after each accepted
    iteration.
    """

    beta: np.ndarray
    kappa: np.ndarray
    objective: float
    penalty_value: float
    iterations: int
    kkt_residual: float
    status: Status
    w: np.ndarray = field(repr=False, default=None)
    trace: list = field(repr=False, default_factory=list)
    step_hint: float = field(repr=False, default=1.0)

    def to_dict(self) -> dict:
        return {
            "beta": [float(v) for v in self.beta],
            "kappa": [float(v) for v in self.kappa],
            "objective": float(self.objective),
            "penalty_value": float(self.penalty_value),
            "iterations": int(self.iterations),
            "kkt_residual": float(self.kkt_residual),
            "status": self.status.value,
        }


# --- penalty terms acting on the w block ------------------------------------

def prox_pnorm(w, t: float, p) -> np.ndarray:
    """Proximal operator of ``t * ||.||_p`` for p in {1, 2, inf}."""
    p = norm_index(p)
    w = np.asarray(w, dtype=float)
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return w.copy()
    if p == 1:
        return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)
    if p == 2:
        nrm = np.linalg.norm(w)
        if nrm <= t:
            return np.zeros_like(w)
        return w * (1.0 - t / nrm)
    # Moreau: prox of t||.||_inf is w minus the projection onto the t-l1 ball
    return w - _convex.project_l1_ball(w, t)


def _zero_tol(w) -> float:
    return 1e-12 * max(1.0, float(np.abs(w).max()) if w.size else 1.0)


class _PNorm:
    def __init__(self, p):
        self.p = norm_index(p)

    def value(self, w) -> float:
        return pnorm(w, self.p)

    def prox(self, z, t):
        return prox_pnorm(z, t, self.p)

    def subdiff_dist(self, w, v, t) -> float:
        """Distance from ``v`` to ``t * subdifferential`` at ``w``."""
        ztol = _zero_tol(w)
        if self.p == 1:
            nz = np.abs(w) > ztol
            d1 = v[nz] - t * np.sign(w[nz])
            d0 = np.maximum(np.abs(v[~nz]) - t, 0.0)
            return math.sqrt(float(d1 @ d1 + d0 @ d0))
        if self.p == 2:
            nrm = np.linalg.norm(w)
            if nrm <= ztol:
                return max(float(np.linalg.norm(v)) - t, 0.0)
            return float(np.linalg.norm(v - t * w / nrm))
        top = float(np.abs(w).max()) if w.size else 0.0
        if top <= ztol:
            return float(np.linalg.norm(v - _convex.project_l1_ball(v, t)))
        J = np.abs(w) >= top * (1.0 - 1e-10)
        sg = np.sign(w[J])
        s = np.zeros_like(v)
        s[J] = sg * _convex.project_simplex(sg * v[J], t)
        return float(np.linalg.norm(v - s))


class _DiagQuad:
    """Weighted 2-norm ``sqrt(sum e_j w_j^2)`` with ``e_j >= 0``."""

    p = 2.0

    def __init__(self, evals):
        self.e = np.asarray(evals, dtype=float)
        if np.any(self.e < 0):
            raise ValueError("weights must be >= 0")
        pos = self.e[self.e > 0]
        self.uniform = pos.size == self.e.size and np.all(pos == pos[0])

    def value(self, w) -> float:
        return math.sqrt(float(np.sum(self.e * w * w)))

    def prox(self, z, t):
        if t == 0:
            return z.copy()
        if self.uniform:
            return prox_pnorm(z, t * math.sqrt(self.e[0]), 2)
        e = self.e
        pos = e > 0
        x = z.copy()
        zp, ep = z[pos], e[pos]
        if np.sum(zp * zp / ep) <= t * t:
            x[pos] = 0.0
            return x
        a = ep * zp * zp

        def h(r):
            return np.sum(a / (r + t * ep) ** 2) - 1.0

        hi = math.sqrt(float(a.sum()))
        r = optimize.brentq(h, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
        x[pos] = zp * r / (r + t * ep)
        return x

    def subdiff_dist(self, w, v, t) -> float:
        nrm = self.value(w)
        if nrm <= _zero_tol(w) * math.sqrt(max(self.e.max(), 1e-300)):
            proj = _convex.project_ellipsoid(v, self.e, t)
            return float(np.linalg.norm(v - proj))
        return float(np.linalg.norm(v - t * self.e * w / nrm))


# --- problem description -----------------------------------------------------

@dataclass
class Problem:
    """``min_{w, c} loss(X (R w + B c)) + weight * N(w)``.

    ``R`` is an optional orthogonal rotation (quadratic-form penalties are
    diagonal in its coordinates), ``B`` an orthonormal basis of the prior span
    and ``thetas`` the original prior vectors in which ``kappa`` is reported.
    """

    data: Dataset
    loss: Loss
    term: object
    weight: float
    basis: np.ndarray
    thetas: np.ndarray
    rotation: np.ndarray | None = None

    def __post_init__(self):
        X = self.data.X
        self.XW = X if self.rotation is None else X @ self.rotation
        self.XB = X @ self.basis

    @property
    def squared(self) -> bool:
        return self.loss is Loss.SQRT_LINEAR

    def to_rot(self, v):
        return v if self.rotation is None else self.rotation.T @ v

    def from_rot(self, w):
        return w if self.rotation is None else self.rotation @ w

    def assemble(self, w_rot, c):
        """``(beta, w, kappa)`` from solver coordinates."""
        w = self.from_rot(w_rot)
        vt = self.basis @ c
        beta = w + vt
        if self.thetas.shape[1]:
            kappa = np.linalg.lstsq(self.thetas, vt, rcond=None)[0]
        else:
            kappa = np.zeros(0)
        return beta, w, kappa

    def loss_value(self, beta) -> float:
        eta = self.data.X @ beta
        y = self.data.y
        if self.loss is Loss.SQRT_LINEAR:
            r = y - eta
            return math.sqrt(float(r @ r) / y.size)
        m = y * eta
        if self.loss is Loss.LOGISTIC:
            return float(np.logaddexp(0.0, -m).mean())
        return float(np.maximum(1.0 - m, 0.0).mean())

    def objective(self, beta, kappa):
        """``(objective as stated, penalty value)`` recomputed from (beta, kappa)."""
        w = beta - self.thetas @ kappa if self.thetas.shape[1] else beta
        pen = self.term.value(self.to_rot(w))
        val = self.loss_value(beta) + self.weight * pen
        return (val * val if self.squared else val), pen


def _check_span(span: PriorSpan, data: Dataset):
    if span.d != data.d:
        raise ValueError(f"prior span has dimension {span.d}, data has {data.d}")
    if span.M and span.rank() >= data.d:
        raise RankDeficiencyGuard(
            f"prior span has rank {span.rank()} = d; strong transfer would leave no "
            "room for perturbation and reduce to empirical risk minimization"
        )


def _check_delta(delta):
    if not (delta >= 0 and math.isfinite(delta)):
        raise ValueError("delta must be a finite number >= 0")


# --- smooth solver -------------------------------------------------------------

class _Smooth:
    """Value and predictor-space derivative of the smooth losses."""

    def __init__(self, prob: Problem, guard: float):
        self.y = prob.data.y
        self.n = self.y.size
        self.sqrt = prob.loss is Loss.SQRT_LINEAR
        self.guard = guard

    def __call__(self, eta):
        if self.sqrt:
            r = self.y - eta
            mse = float(r @ r) / self.n
            f = math.sqrt(mse)
            if mse <= self.guard:
                return f, None
            return f, -r / (self.n * f)
        m = self.y * eta
        f = float(np.logaddexp(0.0, -m).mean())
        return f, -self.y * expit(-m) / self.n


def _kkt_smooth(prob: Problem, w, gw, gc) -> float:
    rw = prob.term.subdiff_dist(w, -gw, prob.weight)
    rc = float(np.linalg.norm(gc)) if gc.size else 0.0
    return math.hypot(rw, rc)


def _proximal_gradient(prob: Problem, cfg: SolverConfig, w0, c0, L0=1.0):
    """Monotone FISTA with backtracking and adaptive restart.

    Returns ``(w, c, iterations, kkt, status, trace, L)``; ``status`` is None
    when the square-root loss hit the perfect-fit guard.
    """
    XW, XB = prob.XW, prob.XB
    smooth = _Smooth(prob, cfg.smooth_guard)
    term, weight = prob.term, prob.weight

    def fwd(w, c):
        return XW @ w + XB @ c if c.size else XW @ w

    def bwd(deta):
        return XW.T @ deta, XB.T @ deta

    x_w, x_c = w0.copy(), c0.copy()
    x_eta = fwd(x_w, x_c)
    f_x, dx = smooth(x_eta)
    # A start at zero residual (e.g. warm start from an interpolator) has no
    # gradient; pull it toward the origin, which has a positive residual
    # unless y is fitted by beta = 0.
    for shrink in (0.5, 0.0):
        if dx is not None:
            break
        x_w, x_c = shrink * w0, shrink * c0
        x_eta = fwd(x_w, x_c)
        f_x, dx = smooth(x_eta)
    if dx is None:
        return x_w, x_c, 0, math.nan, None, [], L0
    F_x = f_x + weight * term.value(x_w)
    gw, gc = bwd(dx)
    kkt = _kkt_smooth(prob, x_w, gw, gc)
    trace = [F_x]
    if kkt <= cfg.tol:
        return x_w, x_c, 0, kkt, Status.CONVERGED, trace, L0

    y_w, y_c, y_eta = x_w, x_c, x_eta
    f_y, dy = f_x, dx
    gyw, gyc = gw, gc
    tk = 1.0
    L = max(L0, 1e-12)
    best_F, stall = F_x, 0
    fixed = cfg.step_rule is StepRule.FIXED_DIMINISHING
    # Newton polish on the identified face once the residual is small
    polish_at = 1e-3 * max(1.0, kkt)
    next_polish, polish_gap = 0, 10
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if fixed:
            step = 1.0 / (L * math.sqrt(it))
            z_w = term.prox(y_w - step * gyw, step * weight)
            z_c = y_c - step * gyc
            z_eta = fwd(z_w, z_c)
            f_z, dz = smooth(z_eta)
        else:
            while True:
                z_w = term.prox(y_w - gyw / L, weight / L)
                z_c = y_c - gyc / L
                z_eta = fwd(z_w, z_c)
                f_z, dz = smooth(z_eta)
                if dz is None:
                    # landed on an interpolator: shorten the step instead
                    L *= 2.0
                    if L > 1e30:
                        break
                    continue
                dw, dc = z_w - y_w, z_c - y_c
                quad = float(gyw @ dw + gyc @ dc) + 0.5 * L * float(dw @ dw + dc @ dc)
                if f_z <= f_y + quad + 1e-13 * max(1.0, abs(f_y)):
                    break
                L *= 2.0
                if L > 1e30:
                    break
        if dz is None:
            return z_w, z_c, it, math.nan, None, trace, L
        F_z = f_z + weight * term.value(z_w)
        if F_z <= F_x:
            nx_w, nx_c, nx_eta, nF, ndx = z_w, z_c, z_eta, F_z, dz
        else:
            nx_w, nx_c, nx_eta, nF, ndx = x_w, x_c, x_eta, F_x, dx
        trace.append(nF)

        gw, gc = bwd(dz)
        kkt = _kkt_smooth(prob, z_w, gw, gc)
        if kkt <= cfg.tol:
            trace[-1] = min(trace[-1], F_z)
            return z_w, z_c, it, kkt, Status.CONVERGED, trace, L
        if kkt <= polish_at and it >= next_polish:
            pol = _polish(prob, nx_w, nx_c, cfg.tol, cfg.smooth_guard)
            if pol is not None:
                p_w, p_c, p_kkt = pol
                F_p = prob.term.value(p_w) * weight + smooth(fwd(p_w, p_c))[0]
                if F_p <= nF:
                    trace.append(F_p)
                    return p_w, p_c, it, p_kkt, Status.CONVERGED, trace, L
            next_polish = it + polish_gap
            polish_gap *= 2

        if fixed:
            y_w, y_c, y_eta, f_y, dy = nx_w, nx_c, nx_eta, nF - weight * term.value(nx_w), ndx
        else:
            if F_z > F_x:
                tk = 1.0  # restart momentum
                t_next = 1.0
                a1, a2 = 0.0, 0.0
            else:
                t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
                a1 = tk / t_next
                a2 = (tk - 1.0) / t_next
            # y = x_new + a1 (z - x_new) + a2 (x_new - x_old)
            y_w = nx_w + a1 * (z_w - nx_w) + a2 * (nx_w - x_w)
            y_c = nx_c + a1 * (z_c - nx_c) + a2 * (nx_c - x_c)
            y_eta = nx_eta + a1 * (z_eta - nx_eta) + a2 * (nx_eta - x_eta)
            tk = t_next
            f_y, dy = smooth(y_eta)
            if dy is None:
                y_w, y_c, y_eta, f_y, dy = nx_w, nx_c, nx_eta, nF - weight * term.value(nx_w), ndx
                tk = 1.0
            L *= 0.9
        gyw, gyc = bwd(dy)
        x_w, x_c, x_eta, F_x, dx = nx_w, nx_c, nx_eta, nF, ndx

        if F_x < best_F - 1e-15 * max(1.0, abs(best_F)):
            best_F, stall = F_x, 0
        else:
            stall += 1
            if stall >= cfg.stall_iter:
                break
    # report the certificate of the best accepted point
    gw, gc = bwd(dx)
    kkt = _kkt_smooth(prob, x_w, gw, gc)
    status = Status.CONVERGED if kkt <= cfg.tol else Status.MAX_ITER
    return x_w, x_c, it, kkt, status, trace, L


# --- active-manifold Newton polish ------------------------------------------------

def _manifold(prob: Problem, w):
    """Parametrize the face of the penalty containing ``w``.

    Returns ``(P, pen, z0, valid)`` with ``w = P @ z`` near ``w``; ``pen(z)``
    gives (value, grad, hess) of the penalty restricted to the face and
    ``valid(z)`` tells whether ``P @ z`` is still on it. None if there is
    nothing smooth to optimize.
    """
    term = prob.term
    d = w.size
    ztol = _zero_tol(w)
    if isinstance(term, _PNorm) and term.p == 1:
        S = np.flatnonzero(np.abs(w) > ztol)
        sg = np.sign(w[S])
        P = np.eye(d)[:, S]

        def pen(z):
            return float(sg @ z), sg, np.zeros((S.size, S.size))

        return P, pen, w[S].copy(), lambda z: bool(np.all(np.sign(z) == sg))
    if isinstance(term, _PNorm) and term.p == math.inf:
        top = float(np.abs(w).max()) if d else 0.0
        if top <= ztol:
            return np.zeros((d, 0)), lambda z: (0.0, z, np.zeros((0, 0))), np.zeros(0), lambda z: True
        J = np.abs(w) >= top * (1.0 - 1e-10)
        O = np.flatnonzero(~J)
        P = np.zeros((d, 1 + O.size))
        P[J, 0] = np.sign(w[J])
        P[O, np.arange(1, 1 + O.size)] = 1.0
        g = np.zeros(1 + O.size)
        g[0] = 1.0
        z0 = np.concatenate([[top], w[O]])

        def pen(z):
            return float(z[0]), g, np.zeros((z.size, z.size))

        return P, pen, z0, lambda z: bool(z[0] > 0 and np.all(np.abs(z[1:]) < z[0]))
    e = term.e if isinstance(term, _DiagQuad) else np.ones(d)
    if math.sqrt(float(np.sum(e * w * w))) <= ztol:
        return np.zeros((d, 0)), lambda z: (0.0, z, np.zeros((0, 0))), np.zeros(0), lambda z: True

    def pen(z):
        n = math.sqrt(float(np.sum(e * z * z)))
        ez = e * z
        return n, ez / n, np.diag(e) / n - np.outer(ez, ez) / n ** 3

    return np.eye(d), pen, w.copy(), lambda z: float(np.sum(e * z * z)) > 0


def _polish(prob: Problem, w, c, tol, guard, max_newton=40):
    """Newton's method on the face of the penalty that contains ``w``.

    Returns ``(w, c, kkt)`` when the polished point is certified, else None.
    """
    P, pen, z, valid = _manifold(prob, w)
    A = np.hstack([prob.XW @ P, prob.XB])
    k = P.shape[1]
    u = np.concatenate([z, c])
    y = prob.data.y
    n = y.size
    t = prob.weight
    sqrt_loss = prob.loss is Loss.SQRT_LINEAR

    def model(u, need_hess=True):
        eta = A @ u
        pv, pg, ph = pen(u[:k])
        if sqrt_loss:
            r = y - eta
            nr = float(np.linalg.norm(r))
            if nr * nr / n <= guard:
                return None
            f = nr / math.sqrt(n)
            gr = -(A.T @ r) / (math.sqrt(n) * nr)
            if need_hess:
                Ar = A.T @ r
                H = (A.T @ A) / (math.sqrt(n) * nr) - np.outer(Ar, Ar) / (math.sqrt(n) * nr ** 3)
        else:
            m = y * eta
            f = float(np.logaddexp(0.0, -m).mean())
            sig = expit(-m)
            gr = -(A.T @ (y * sig)) / n
            if need_hess:
                H = (A.T * (sig * (1.0 - sig))) @ A / n
        val = f + t * pv
        g = gr.copy()
        g[:k] += t * pg
        if not need_hess:
            return val, g, None
        H[:k, :k] += t * ph
        return val, g, H

    cur = model(u)
    if cur is None:
        return None
    for _ in range(max_newton):
        val, g, H = cur
        gn = float(np.linalg.norm(g))
        if gn <= 0.1 * tol:
            break
        scale = max(float(np.trace(H)) / max(H.shape[0], 1), 1e-300)
        try:
            step = np.linalg.solve(H + 1e-14 * scale * np.eye(H.shape[0]), -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -g, rcond=None)[0]
        dec = float(g @ step)
        if not dec < 0:
            return None
        s = 1.0
        while s > 1e-10:
            un = u + s * step
            if valid(un[:k]):
                nxt = model(un)
                if nxt is not None and nxt[0] <= val + 1e-4 * s * dec + 1e-15 * abs(val):
                    break
            s *= 0.5
        else:
            break
        u, cur = un, nxt
    z, c_new = u[:k], u[k:]
    if not valid(z):
        return None
    w_new = P @ z
    if prob.loss is Loss.SQRT_LINEAR:
        smooth = _Smooth(prob, guard)
        _, deta = smooth(prob.XW @ w_new + (prob.XB @ c_new if c_new.size else 0.0))
        if deta is None:
            return None
    else:
        _, deta = _Smooth(prob, guard)(prob.XW @ w_new + (prob.XB @ c_new if c_new.size else 0.0))
    kkt = _kkt_smooth(prob, w_new, prob.XW.T @ deta, prob.XB.T @ deta)
    if kkt <= tol:
        return w_new, c_new, kkt
    return None


# --- perfect fit (square-root loss with zero residual) -------------------------

def _min_penalty_interpolator(prob: Problem):
    """``min N(w)`` s.t. ``X (R w + B c) = y``; returns ``(w, c, nu)`` or None."""
    XW, XB, y = prob.XW, prob.XB, prob.data.y
    term = prob.term
    if isinstance(term, _PNorm) and term.p != 2:
        try:
            w, c, nu = _convex.lp_min_norm_interpolator(XW, y, prob.basis, term.p)
        except _convex.SubproblemError:
            return None
        # HiGHS reports d(objective)/d(rhs); flip if that gives the wrong sign.
        if term.subdiff_dist(w, -XW.T @ nu, 1.0) < term.subdiff_dist(w, XW.T @ nu, 1.0):
            nu = -nu
    else:
        e = term.e if isinstance(term, _DiagQuad) else np.ones(XW.shape[1])
        if np.any(e <= 0):
            return None
        scale = 1.0 / np.sqrt(e)
        D = XW * scale
        if XB.shape[1]:
            Q, _ = np.linalg.qr(XB)
            PD = D - Q @ (Q.T @ D)
            Py = y - Q @ (Q.T @ y)
        else:
            Q = None
            PD, Py = D, y
        v = np.linalg.lstsq(PD, Py, rcond=None)[0]
        w = v * scale
        c = np.linalg.lstsq(XB, y - XW @ w, rcond=None)[0] if Q is not None else np.zeros(0)
        nv = np.linalg.norm(v)
        if nv > 0:
            mu = np.linalg.lstsq(PD.T, v, rcond=None)[0]
            if Q is not None:
                mu = mu - Q @ (Q.T @ mu)
            nu = mu / nv
        else:
            nu = np.zeros_like(y)
    resid = XW @ w + (XB @ c if c.size else 0.0) - y
    if np.linalg.norm(resid) > 1e-9 * max(1.0, np.linalg.norm(y)):
        return None
    return w, c, nu


def _perfect_fit_certificate(prob: Problem, w, c, nu) -> float:
    """KKT residual at an interpolator using ``u = sqrt(N) * weight * nu``.

    At zero residual the subdifferential of the root-MSE is
    ``{-X'u / sqrt(N) : ||u|| <= 1}``; ``u`` is clipped to the unit ball.
    """
    n = prob.data.N
    u = math.sqrt(n) * prob.weight * nu
    nu_norm = float(np.linalg.norm(u))
    excess = max(nu_norm - 1.0, 0.0)
    if nu_norm > 1.0:
        u = u / nu_norm
    g = -u / math.sqrt(n)
    gw, gc = prob.XW.T @ g, prob.XB.T @ g
    eta = prob.XW @ w + (prob.XB @ c if c.size else 0.0)
    feas = float(np.linalg.norm(prob.data.y - eta)) / math.sqrt(n)
    return _kkt_smooth(prob, w, gw, gc) + feas + excess


# --- hinge ------------------------------------------------------------------

_KINK_TOL = 1e-8


def _hinge_blocks(prob: Problem, w_rot, c, kink_tol=_KINK_TOL):
    """Gradient pieces of the hinge loss at ``beta``.

    The subdifferential is ``g0 + H a`` with ``a`` in ``[0, 1]^k`` where the
    columns of ``H`` belong to samples sitting on the kink.
    """
    X, y = prob.data.X, prob.data.y
    n = y.size
    beta = prob.from_rot(w_rot) + prob.basis @ c
    m = y * (X @ beta)
    act = m < 1.0 - kink_tol
    kink = np.abs(m - 1.0) <= kink_tol
    g0 = -(X[act].T @ y[act]) / n
    H = -(X[kink] * y[kink][:, None]).T / n
    R = prob.rotation
    g0w = g0 if R is None else R.T @ g0
    Hw = H if R is None else R.T @ H
    return g0w, Hw, prob.basis.T @ g0, prob.basis.T @ H, kink


def _hinge_kkt(prob: Problem, w_rot, c) -> float:
    """Distance from zero to the subdifferential of hinge + penalty.

    Margins within ``_KINK_TOL`` of one are treated as kinks whose
    multipliers are optimized together with the free part of the penalty
    subgradient. Every branch evaluates the residual at a feasible
    multiplier, so the value is an upper bound on the exact distance.
    """
    g0w, Hw, g0c, Hc, _ = _hinge_blocks(prob, w_rot, c)
    t = prob.weight
    term = prob.term
    k = Hw.shape[1]
    d = w_rot.size
    r = g0c.size
    ztol = _zero_tol(w_rot)

    def residual(a, s):
        return math.hypot(float(np.linalg.norm(g0w + Hw @ a + t * s)),
                          float(np.linalg.norm(g0c + Hc @ a)))

    # s = s_fixed + F @ v with v boxed: exact bounded least squares
    fixed_s, F, lo, hi, heavy = None, None, None, None, None
    if isinstance(term, _PNorm) and term.p == 1:
        free = np.abs(w_rot) <= ztol
        fixed_s = np.where(free, 0.0, np.sign(w_rot))
        F = np.eye(d)[:, free]
        lo, hi = -np.ones(F.shape[1]), np.ones(F.shape[1])
    elif isinstance(term, _PNorm) and term.p == 2 and np.linalg.norm(w_rot) > ztol:
        fixed_s = w_rot / np.linalg.norm(w_rot)
    elif isinstance(term, _DiagQuad) and term.value(w_rot) > ztol:
        fixed_s = term.e * w_rot / term.value(w_rot)
    elif isinstance(term, _PNorm) and term.p == math.inf:
        top = float(np.abs(w_rot).max()) if d else 0.0
        fixed_s = np.zeros(d)
        if top > ztol:
            # s = sum_J sign_j lam_j e_j, lam in the simplex
            J = np.flatnonzero(np.abs(w_rot) >= top * (1.0 - 1e-10))
            F = np.zeros((d, J.size))
            F[J, np.arange(J.size)] = np.sign(w_rot[J])
            heavy = "simplex"
        else:
            # s = lam+ - lam-, sum(lam+ + lam-) + slack = 1
            F = np.hstack([np.eye(d), -np.eye(d), np.zeros((d, 1))])
            heavy = "ball"
        lo, hi = np.zeros(F.shape[1]), np.full(F.shape[1], np.inf)

    if fixed_s is not None:
        if F is None:
            F = np.zeros((d, 0))
            lo, hi = np.zeros(0), np.zeros(0)
        nf = F.shape[1]
        A = np.vstack([np.hstack([Hw, t * F]), np.hstack([Hc, np.zeros((r, nf))])])
        b = -np.concatenate([g0w + t * fixed_s, g0c])
        if heavy is not None:
            omega = 1e6 * max(1.0, float(np.abs(A).max()) if A.size else 1.0)
            A = np.vstack([A, np.concatenate([np.zeros(k), np.full(nf, omega)])])
            b = np.concatenate([b, [omega]])
        if A.shape[1] == 0:
            return residual(np.zeros(0), fixed_s)
        x = _convex.box_lsq(A, b, np.concatenate([np.zeros(k), lo]),
                            np.concatenate([np.ones(k), hi]))
        a, v = np.clip(x[:k], 0.0, 1.0), x[k:]
        if heavy == "simplex":
            tot = v.sum()
            v = v / tot if tot > 0 else np.full(nf, 1.0 / nf)
        elif heavy == "ball":
            tot = v.sum()
            if tot > 1.0:
                v = v / tot
        return residual(a, fixed_s + F @ v)

    # w = 0 under a 2-norm or quadratic-form penalty: s in a ball/ellipsoid
    import cvxpy as cp

    e = term.e if isinstance(term, _DiagQuad) else np.ones(d)
    pos = e > 0
    a = cp.Variable(k) if k else None
    q = cp.Variable(int(pos.sum()))  # s_pos = sqrt(e) * q, ||q|| <= 1
    s_expr = np.eye(d)[:, pos] @ cp.multiply(np.sqrt(e[pos]), q)
    top = g0w + t * s_expr + (Hw @ a if k else 0)
    bot = g0c + (Hc @ a if k else 0)
    cons = [cp.norm(q, 2) <= 1]
    if k:
        cons += [a >= 0, a <= 1]
    obj = cp.norm(cp.hstack([top, bot]) if r else top, 2)
    with warnings.catch_warnings():
        # accuracy is judged by the residual computed below, not the solver
        warnings.simplefilter("ignore", UserWarning)
        cp.Problem(cp.Minimize(obj), cons).solve(
            solver=cp.CLARABEL, tol_gap_abs=1e-14, tol_gap_rel=1e-12, tol_feas=1e-12)
    qv = np.asarray(q.value, dtype=float) if q.value is not None else np.zeros(int(pos.sum()))
    nq = np.linalg.norm(qv)
    if nq > 1.0:
        qv = qv / nq
    s = np.zeros(d)
    s[pos] = np.sqrt(e[pos]) * qv
    av = np.clip(np.asarray(a.value, dtype=float), 0.0, 1.0) if k else np.zeros(0)
    return residual(av, s)


def _hinge_newton(prob: Problem, w_rot, c, iters=20, kink_tol=1e-6):
    """Refine a cone-solver hinge solution with a nonzero quadratic-form penalty.

    On the face fixed by the active and kink sets the problem is smooth with
    linear equality constraints; Newton's method on its KKT system recovers
    full double precision.
    """
    e = prob.term.e if isinstance(prob.term, _DiagQuad) else np.ones(w_rot.size)
    g0w, Hw, g0c, Hc, kink = _hinge_blocks(prob, w_rot, c, kink_tol=kink_tol)
    if not np.sum(e * w_rot * w_rot) > 0:
        return None
    X, y = prob.data.X, prob.data.y
    ZK = y[kink][:, None] * X[kink]
    ZW = ZK if prob.rotation is None else ZK @ prob.rotation
    ZB = ZK @ prob.basis
    d, r, k = w_rot.size, c.size, int(kink.sum())
    t = prob.weight
    # initial multipliers from least squares on the stationarity equations
    A0 = np.vstack([Hw, Hc])
    nw = math.sqrt(float(np.sum(e * w_rot * w_rot)))
    rhs = -np.concatenate([g0w + t * e * w_rot / nw, g0c])
    a = np.linalg.lstsq(A0, rhs, rcond=None)[0] if k else np.zeros(0)
    u = np.concatenate([w_rot, c, a])
    for _ in range(iters):
        w, cc, a = u[:d], u[d:d + r], u[d + r:]
        nw = math.sqrt(float(np.sum(e * w * w)))
        ew = e * w
        F = np.concatenate([g0w + Hw @ a + t * ew / nw, g0c + Hc @ a, ZW @ w + ZB @ cc - 1.0])
        if np.linalg.norm(F) <= 1e-15:
            break
        J = np.zeros((d + r + k, d + r + k))
        J[:d, :d] = t * (np.diag(e) / nw - np.outer(ew, ew) / nw ** 3)
        J[:d, d + r:] = Hw
        J[d:d + r, d + r:] = Hc
        J[d + r:, :d] = ZW
        J[d + r:, d:d + r] = ZB
        u = u - np.linalg.lstsq(J, F, rcond=None)[0]
    w, cc, a = u[:d], u[d:d + r], u[d + r:]
    if not (np.all(np.isfinite(u)) and np.all(a >= -1e-12) and np.all(a <= 1 + 1e-12)):
        return None
    return w, cc


def _solve_hinge(prob: Problem, cfg: SolverConfig):
    term = prob.term
    if isinstance(term, _PNorm) and term.p != 2 and prob.rotation is None:
        w, c, nit = _convex.lp_hinge(prob.data.X, prob.data.y, prob.basis, prob.weight, term.p)
    else:
        w, c, nit = _socp_hinge(prob)
        if not np.any(w) and c.size:
            # with w = 0 only the span block is left, which is an LP
            c, _, extra = _convex.lp_hinge(prob.XB, prob.data.y,
                                           np.zeros((c.size, 0)), 0.0, 1)
            nit += extra
    kkt = _hinge_kkt(prob, w, c)
    if not (isinstance(term, _PNorm) and term.p != 2):
        def obj(ww, cc):
            return prob.loss_value(prob.from_rot(ww) + prob.basis @ cc) + prob.weight * term.value(ww)

        base = obj(w, c)
        # the kink set is only known up to the cone solver's accuracy
        for ktol in (1e-7, 1e-6, 1e-5, 1e-4):
            if kkt <= 1e-3 * cfg.tol:
                break
            ref = _hinge_newton(prob, w, c, kink_tol=ktol)
            if ref is not None:
                k2 = _hinge_kkt(prob, *ref)
                if k2 < kkt and obj(*ref) <= base + 1e-12:
                    (w, c), kkt = ref, k2
    status = Status.CONVERGED if kkt <= cfg.tol else Status.MAX_ITER
    beta = prob.from_rot(w) + prob.basis @ c
    return w, c, nit, kkt, status, [prob.loss_value(beta) + prob.weight * term.value(w)]


def _socp_hinge(prob: Problem):
    import cvxpy as cp

    X, y = prob.XW, prob.data.y
    n, d = X.shape
    r = prob.basis.shape[1]
    w = cp.Variable(d)
    sq = np.sqrt(prob.term.e) if isinstance(prob.term, _DiagQuad) else np.ones(d)
    margin = cp.multiply(y, X @ w)
    if r:
        c = cp.Variable(r)
        margin = margin + cp.multiply(y, prob.XB @ c)
    obj = cp.sum(cp.pos(1 - margin)) / n + prob.weight * cp.norm(cp.multiply(sq, w), 2)
    problem = cp.Problem(cp.Minimize(obj))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                      tol_feas=1e-10, max_iter=500)
    if w.value is None:
        raise _convex.SubproblemError(f"SOCP failed: {problem.status}")
    c_val = np.asarray(c.value, dtype=float) if r else np.zeros(0)
    w_val = np.asarray(w.value, dtype=float)
    if np.linalg.norm(sq * w_val) < 1e-9 * max(1.0, np.linalg.norm(c_val)):
        w_val = np.zeros(d)
    its = problem.solver_stats.num_iters if problem.solver_stats else 0
    return w_val, c_val, int(its or 0)


# --- driver -------------------------------------------------------------------

def _initial_point(prob: Problem, init):
    d, r = prob.XW.shape[1], prob.basis.shape[1]
    if init is None:
        return np.zeros(d), np.zeros(r), 1.0
    if isinstance(init, FitResult):
        L0 = init.step_hint
        if init.w is not None:
            vt = init.beta - init.w
            return prob.to_rot(init.w).copy(), prob.basis.T @ vt, L0
        init = init.beta
    else:
        L0 = 1.0
    beta0 = np.asarray(init, dtype=float)
    c0 = prob.basis.T @ beta0
    return prob.to_rot(beta0 - prob.basis @ c0), c0, L0


def _finish(prob: Problem, w_rot, c, nit, kkt, status, trace, L=1.0) -> FitResult:
    beta, w, kappa = prob.assemble(w_rot, c)
    obj, pen = prob.objective(beta, kappa)
    return FitResult(beta=beta, kappa=kappa, objective=obj, penalty_value=pen,
                     iterations=int(nit), kkt_residual=float(kkt), status=status,
                     w=w, trace=trace, step_hint=float(L))


def _solve(prob: Problem, cfg: SolverConfig, init=None) -> FitResult:
    if prob.loss is Loss.HINGE:
        w, c, nit, kkt, status, trace = _solve_hinge(prob, cfg)
        return _finish(prob, w, c, nit, kkt, status, trace)

    if prob.loss is Loss.SQRT_LINEAR:
        n, d = prob.XW.shape
        if prob.weight == 0.0 and n > d:
            beta = np.linalg.lstsq(prob.data.X, prob.data.y, rcond=None)[0]
            c = prob.basis.T @ beta
            w = prob.to_rot(beta - prob.basis @ c)
            smooth = _Smooth(prob, cfg.smooth_guard)
            f, deta = smooth(prob.XW @ w + prob.XB @ c)
            if deta is not None:
                kkt = _kkt_smooth(prob, w, prob.XW.T @ deta, prob.XB.T @ deta)
                status = Status.CONVERGED if kkt <= cfg.tol else Status.MAX_ITER
                return _finish(prob, w, c, 0, kkt, status, [f])
        if n <= d or prob.weight == 0.0:
            interp = _min_penalty_interpolator(prob)
            if interp is not None:
                w, c, nu = interp
                cert = _perfect_fit_certificate(prob, w, c, nu)
                if math.sqrt(n) * prob.weight * np.linalg.norm(nu) <= 1.0 + 1e-9:
                    return _finish(prob, w, c, 0, cert, Status.PERFECT_FIT,
                                   [prob.weight * prob.term.value(w)])

    w0, c0, L0 = _initial_point(prob, init)
    w, c, nit, kkt, status, trace, L = _proximal_gradient(prob, cfg, w0, c0, L0)
    if status is None:
        interp = _min_penalty_interpolator(prob)
        if interp is not None:
            w, c, nu = interp
            kkt = _perfect_fit_certificate(prob, w, c, nu)
        else:
            kkt = math.inf
        status = Status.PERFECT_FIT
    return _finish(prob, w, c, nit, kkt, status, trace, L)


# --- public fits ----------------------------------------------------------------

def _strong_problem(data, span, term, weight, loss):
    return Problem(data=data, loss=loss, term=term, weight=weight,
                   basis=span.basis(), thetas=np.asarray(span.thetas))


def _require(data: Dataset, task: Task):
    if data.task is not task:
        raise ValueError(f"expected a {task.value} dataset, got {data.task.value}")


def fit_linear_strong(data: Dataset, span: PriorSpan, p, delta: float,
                      cfg: SolverConfig = SolverConfig(), init=None) -> FitResult:
    """Square-root linear regression shrunk toward the prior span.

    Minimizes ``(sqrt(MSE(beta)) + sqrt(delta) * min_{v in span} ||beta - v||_p)^2``;
    the reported ``objective`` is this squared value.
    """
    _require(data, Task.REGRESSION)
    _check_delta(delta)
    _check_span(span, data)
    prob = _strong_problem(data, span, _PNorm(p), math.sqrt(delta), Loss.SQRT_LINEAR)
    return _solve(prob, cfg, init)


def _weak_problem(data, theta, lambda_inv, delta):
    psi = PsiMatrix(theta, lambda_inv)
    evals, evecs = psi.eigh()
    return Problem(data=data, loss=Loss.SQRT_LINEAR, term=_DiagQuad(evals),
                   weight=math.sqrt(delta), basis=np.zeros((data.d, 0)),
                   thetas=np.zeros((data.d, 0)), rotation=evecs)


def fit_linear_weak(data: Dataset, theta, lambda_inv: float, delta: float,
                    cfg: SolverConfig = SolverConfig(), init=None) -> FitResult:
    """Square-root regression with the weak-transfer penalty ``||beta||_{Psi_a}``.

    ``a = lambda_inv``. The penalty is handled in the eigenbasis of ``Psi_a``
    where it is a weighted 2-norm; ``a = 0`` is the semi-norm
    ``||beta_perp||_2`` and is solved as the strong fit with a single prior.
    """
    _require(data, Task.REGRESSION)
    _check_delta(delta)
    if not lambda_inv >= 0:
        raise ValueError("lambda_inv must be >= 0")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.d,):
        raise ValueError("theta dimension does not match the data")
    if not np.any(theta):
        raise ValueError("theta must be non-zero")
    if lambda_inv == 0:
        res = fit_linear_strong(data, PriorSpan([theta]), 2, delta, cfg, init)
        res.kappa = np.zeros(0)
        res.w = res.beta.copy()
        return res
    prob = _weak_problem(data, theta, lambda_inv, delta)
    if isinstance(init, FitResult):
        init = init.beta
    return _solve(prob, cfg, init)


def fit_classifier_strong(data: Dataset, span: PriorSpan, p, delta: float,
                          loss: Loss | str = Loss.LOGISTIC,
                          cfg: SolverConfig = SolverConfig(), init=None) -> FitResult:
    """Logistic or hinge classifier with ``delta * min_{v in span} ||beta - v||_p``."""
    _require(data, Task.CLASSIFICATION)
    _check_delta(delta)
    _check_span(span, data)
    loss = Loss(loss)
    if loss is Loss.SQRT_LINEAR:
        raise ValueError("classifiers use the logistic or hinge loss")
    prob = _strong_problem(data, span, _PNorm(p), float(delta), loss)
    return _solve(prob, cfg, init)


def _mahalanobis_problem(data, span, Lambda, delta, loss):
    cholesky_spd(Lambda)
    Lam = np.asarray(Lambda, dtype=float)
    if Lam.shape != (data.d, data.d):
        raise ValueError("Lambda dimension does not match the data")
    evals, evecs = np.linalg.eigh(0.5 * (Lam + Lam.T))
    if np.all(Lam == np.diag(np.diag(Lam))):
        evals, evecs = np.diag(Lam).copy(), np.eye(data.d)
    weight = math.sqrt(delta) if loss is Loss.SQRT_LINEAR else float(delta)
    return Problem(data=data, loss=loss, term=_DiagQuad(1.0 / evals), weight=weight,
                   basis=span.basis(), thetas=np.asarray(span.thetas),
                   rotation=None if np.array_equal(evecs, np.eye(data.d)) else evecs)


def fit_mahalanobis(data: Dataset, span: PriorSpan, Lambda, delta: float,
                    loss: Loss | str = Loss.SQRT_LINEAR,
                    cfg: SolverConfig = SolverConfig(), init=None) -> FitResult:
    """Strong transfer with the distance to the span measured in ``||.||_{Lambda^{-1}}``.

    A small diagonal entry of ``Lambda`` makes deviations from the span in that
    coordinate expensive, which transfers only part of the prior vector.
    """
    loss = Loss(loss)
    _require(data, Task.REGRESSION if loss is Loss.SQRT_LINEAR else Task.CLASSIFICATION)
    _check_delta(delta)
    _check_span(span, data)
    prob = _mahalanobis_problem(data, span, Lambda, delta, loss)
    return _solve(prob, cfg, init)


def fit_span_constrained(data: Dataset, span: PriorSpan, loss: Loss | str,
                         cfg: SolverConfig = SolverConfig()) -> FitResult:
    """The infinite-radius limit: ``min_{beta in span} loss(beta)``."""
    loss = Loss(loss)
    if span.M == 0:
        raise ValueError("a constrained fit needs at least one prior vector")
    basis = span.basis()
    # penalty weight is irrelevant: w is pinned to zero by an empty block
    reduced = Dataset(data.X @ basis, data.y, data.task)
    prob = Problem(data=reduced, loss=loss, term=_PNorm(2), weight=0.0,
                   basis=np.zeros((basis.shape[1], 0)), thetas=np.zeros((basis.shape[1], 0)))
    if loss is Loss.SQRT_LINEAR:
        c = np.linalg.lstsq(reduced.X, data.y, rcond=None)[0]
        res = _finish(prob, c, np.zeros(0), 0, 0.0, Status.CONVERGED, [])
        smooth = _Smooth(prob, cfg.smooth_guard)
        _, deta = smooth(reduced.X @ c)
        res.kkt_residual = float(np.linalg.norm(reduced.X.T @ deta)) if deta is not None else 0.0
    else:
        res = _solve(prob, cfg)
    c = res.beta
    beta = basis @ c
    kappa = span.coefficients(beta)
    obj = Problem(data=data, loss=loss, term=_PNorm(2), weight=0.0, basis=basis,
                  thetas=np.asarray(span.thetas)).loss_value(beta)
    return replace(res, beta=beta, kappa=kappa, objective=obj * obj if loss is Loss.SQRT_LINEAR else obj,
                   penalty_value=0.0, w=np.zeros(data.d))


# --- certificates -----------------------------------------------------------------

def kkt_residual(result: FitResult, problem: Problem, smooth_guard: float = SMOOTH_GUARD) -> float:
    """Stationarity residual of ``result`` for ``problem``.

    Smooth losses: distance from minus the gradient to ``weight`` times the
    penalty subdifferential on the ``w`` block, combined (Euclidean) with the
    plain gradient norm on the span block. Hinge: the same with the kink
    multipliers optimized. Square-root loss at zero residual: the perfect-fit
    certificate.
    """
    beta = np.asarray(result.beta, dtype=float)
    if result.w is not None and problem.thetas.shape[1]:
        w = np.asarray(result.w, dtype=float)
    elif problem.thetas.shape[1]:
        w = beta - problem.thetas @ result.kappa
    else:
        w = beta
    vt = beta - w
    c = problem.basis.T @ vt
    w_rot = problem.to_rot(w)
    if problem.loss is Loss.HINGE:
        return _hinge_kkt(problem, w_rot, c)
    smooth = _Smooth(problem, smooth_guard)
    eta = problem.data.X @ beta
    _, deta = smooth(eta)
    if deta is None:
        interp = _min_penalty_interpolator(problem)
        if interp is None:
            return math.inf
        return _perfect_fit_certificate(problem, w_rot, c, interp[2])
    return _kkt_smooth(problem, w_rot, problem.XW.T @ deta, problem.XB.T @ deta)


def make_problem(kind: str, data: Dataset, *, span: PriorSpan | None = None, p=2,
                 delta: float = 0.0, theta=None, lambda_inv: float | None = None,
                 Lambda=None, loss: Loss | str = Loss.SQRT_LINEAR) -> Problem:
    """Build the :class:`Problem` a fit function solves (for :func:`kkt_residual`)."""
    loss = Loss(loss)
    if kind == "linear_strong":
        return _strong_problem(data, span, _PNorm(p), math.sqrt(delta), Loss.SQRT_LINEAR)
    if kind == "linear_weak":
        if lambda_inv == 0:
            return _strong_problem(data, PriorSpan([theta]), _PNorm(2), math.sqrt(delta),
                                   Loss.SQRT_LINEAR)
        return _weak_problem(data, theta, lambda_inv, delta)
    if kind == "classifier_strong":
        return _strong_problem(data, span, _PNorm(p), float(delta), loss)
    if kind == "mahalanobis":
        return _mahalanobis_problem(data, span, Lambda, delta, loss)
    raise ValueError(f"unknown problem kind {kind!r}")
