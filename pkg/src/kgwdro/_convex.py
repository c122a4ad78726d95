"""Small convex building blocks: LP subproblems and Euclidean projections.

The LPs are handed to HiGHS through :func:`scipy.optimize.linprog`, which
returns vertex solutions (exact zeros, exact kinks) that the KKT checks rely on.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize


class SubproblemError(RuntimeError):
    """An inner convex subproblem could not be solved."""


def _linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
    res = optimize.linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
        method="highs-ds",
    )
    if res.status != 0:
        raise SubproblemError(f"LP failed: {res.message}")
    return res


def lp_span_distance(beta, thetas, p):
    """Solve ``min_k ||beta - thetas @ k||_p`` for p in {1, inf} as an LP.

    A second stage picks, among the minimizers, the one with smallest
    ``||k||_1`` so the returned coefficients are deterministic.
    """
    beta = np.asarray(beta, dtype=float)
    d, m = thetas.shape
    if p == 1:
        # x = [k (free, m), t (d, >= 0)]
        n_aux = d
        c = np.concatenate([np.zeros(m), np.ones(d)])
        A = np.block([[-thetas, -np.eye(d)], [thetas, -np.eye(d)]])
    else:
        # x = [k (free, m), s (>= 0)]
        n_aux = 1
        c = np.concatenate([np.zeros(m), [1.0]])
        A = np.block([[-thetas, -np.ones((d, 1))], [thetas, -np.ones((d, 1))]])
    b = np.concatenate([-beta, beta])
    bounds = [(None, None)] * m + [(0, None)] * n_aux
    res = _linprog(c, A_ub=A, b_ub=b, bounds=bounds)
    best = res.fun

    # k = k+ - k-, minimize ||k||_1 subject to near-optimal distance.
    slack = 1e-12 * max(1.0, abs(best))
    A2 = np.hstack([A[:, :m], -A[:, :m], A[:, m:]])
    obj_row = np.concatenate([np.zeros(2 * m), c[m:]])
    A2 = np.vstack([A2, obj_row])
    b2 = np.concatenate([b, [best + slack]])
    c2 = np.concatenate([np.ones(2 * m), np.zeros(n_aux)])
    try:
        res2 = _linprog(c2, A_ub=A2, b_ub=b2, bounds=[(0, None)] * (2 * m + n_aux))
        kappa = res2.x[:m] - res2.x[m:2 * m]
    except SubproblemError:
        kappa = res.x[:m]
    return kappa


def lp_hinge(X, y, basis, weight, p):
    """Hinge loss plus ``weight * ||w||_p`` (p in {1, inf}) with free span part.

    Returns ``(w, c, n_iter)`` with ``beta = w + basis @ c``.
    """
    n, d = X.shape
    r = basis.shape[1]
    Z = y[:, None] * X
    ZB = Z @ basis
    if p == 1:
        # x = [w+ (d), w- (d), c (r), xi (n)]
        cost = np.concatenate([np.full(2 * d, weight), np.zeros(r), np.full(n, 1.0 / n)])
        A = np.hstack([-Z, Z, -ZB, -np.eye(n)])
        bounds = [(0, None)] * (2 * d) + [(None, None)] * r + [(0, None)] * n
        res = _linprog(cost, A_ub=A, b_ub=-np.ones(n), bounds=bounds)
        w = res.x[:d] - res.x[d:2 * d]
        c = res.x[2 * d:2 * d + r]
    else:
        # x = [w (d), s, c (r), xi (n)], |w_j| <= s
        cost = np.concatenate([np.zeros(d), [weight], np.zeros(r), np.full(n, 1.0 / n)])
        A_margin = np.hstack([-Z, np.zeros((n, 1)), -ZB, -np.eye(n)])
        eye = np.eye(d)
        A_box = np.vstack([
            np.hstack([eye, -np.ones((d, 1)), np.zeros((d, r + n))]),
            np.hstack([-eye, -np.ones((d, 1)), np.zeros((d, r + n))]),
        ])
        A = np.vstack([A_margin, A_box])
        b = np.concatenate([-np.ones(n), np.zeros(2 * d)])
        bounds = [(None, None)] * d + [(0, None)] + [(None, None)] * r + [(0, None)] * n
        res = _linprog(cost, A_ub=A, b_ub=b, bounds=bounds)
        w = res.x[:d]
        c = res.x[d + 1:d + 1 + r]
    return w, c, int(res.nit)


def lp_min_norm_interpolator(X, y, basis, p):
    """``min ||w||_p`` s.t. ``X (w + basis c) = y`` for p in {1, inf}.

    Returns ``(w, c, nu)`` where ``nu`` are the equality multipliers, so that
    ``X.T @ nu`` is a subgradient of the norm at ``w``.
    """
    n, d = X.shape
    r = basis.shape[1]
    XB = X @ basis
    if p == 1:
        cost = np.concatenate([np.ones(2 * d), np.zeros(r)])
        A_eq = np.hstack([X, -X, XB])
        bounds = [(0, None)] * (2 * d) + [(None, None)] * r
        res = _linprog(cost, A_eq=A_eq, b_eq=y, bounds=bounds)
        w = res.x[:d] - res.x[d:2 * d]
        c = res.x[2 * d:]
    else:
        eye = np.eye(d)
        cost = np.concatenate([np.zeros(d), [1.0], np.zeros(r)])
        A_eq = np.hstack([X, np.zeros((n, 1)), XB])
        A_ub = np.vstack([
            np.hstack([eye, -np.ones((d, 1)), np.zeros((d, r))]),
            np.hstack([-eye, -np.ones((d, 1)), np.zeros((d, r))]),
        ])
        bounds = [(None, None)] * d + [(0, None)] + [(None, None)] * r
        res = _linprog(cost, A_ub=A_ub, b_ub=np.zeros(2 * d), A_eq=A_eq, b_eq=y,
                       bounds=bounds)
        w = res.x[:d]
        c = res.x[d + 1:]
    nu = np.asarray(res.eqlin.marginals, dtype=float)
    return w, c, nu


# --- projections -------------------------------------------------------------

def project_simplex(v, radius=1.0):
    """Euclidean projection onto ``{x >= 0, sum(x) = radius}``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    if radius <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - radius
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    k = idx[cond][-1]
    tau = css[cond][-1] / k
    return np.maximum(v - tau, 0.0)


def project_l1_ball(v, radius=1.0):
    """Euclidean projection onto the l1 ball of the given radius."""
    v = np.asarray(v, dtype=float)
    if np.abs(v).sum() <= radius:
        return v.copy()
    return np.sign(v) * project_simplex(np.abs(v), radius)


def project_ellipsoid(v, evals, radius=1.0):
    """Project ``v`` (eigen-coordinates) onto ``{x : sum x_j^2 / e_j <= r^2}``.

    Coordinates with ``e_j == 0`` are pinned to zero.
    """
    v = np.asarray(v, dtype=float)
    evals = np.asarray(evals, dtype=float)
    pos = evals > 0
    x = np.zeros_like(v)
    vp, ep = v[pos], evals[pos]
    if np.sum(vp ** 2 / ep) <= radius ** 2:
        x[pos] = vp
        return x

    def excess(tau):
        return np.sum(ep * vp ** 2 / (ep + tau) ** 2) - radius ** 2

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    tau = optimize.brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    x[pos] = ep * vp / (ep + tau)
    return x


def box_lsq(A, b, lb, ub):
    """``min ||A x - b||`` subject to ``lb <= x <= ub`` (bounded-variable LSQ)."""
    if A.shape[1] == 0:
        return np.zeros(0)
    res = optimize.lsq_linear(A, b, bounds=(lb, ub), method="bvls", tol=1e-15,
                              lsmr_tol=None)
    return res.x

