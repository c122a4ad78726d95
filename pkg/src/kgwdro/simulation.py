"""Simulation studies: coefficient schemes, data generators and the rep driver.

Each repetition draws its randomness from ``numpy.random.default_rng([seed,
rep, stream])`` so results do not depend on execution order. Priors and
source data do not depend on the truth-prior correlation, which lets one rep
fit the source priors once and reuse them for every correlation cell (common
random numbers across a table row).
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .estimators import Loss, SolverConfig, fit_span_constrained
from .losses import Dataset, Task
from .penalties import PriorSpan
from .selection import FitSpec, Grid, grid_search, make_log_grid, score

__all__ = [
    "CoefScheme",
    "MultiSourceScheme",
    "SimConfig",
    "SimReport",
    "gen_coef_pair",
    "gen_multisource",
    "gen_linear_data",
    "gen_logistic_data",
    "run_simulation",
    "default_config",
]

log = logging.getLogger(__name__)

# stream ids for the per-rep seed sequence
_COEF, _SOURCE, _TRAIN, _VAL, _TEST = 0, 1, 2, 3, 4


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class CoefScheme:
    """Bivariate-normal coefficient pairs on an active block plus zero padding."""

    d_active: int = 50
    d_pad: int = 100
    sigma2: float = 0.4
    rho: float = 0.5
    scale_s: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")
        if not abs(self.rho) <= 1:
            raise ValueError("|rho| must be <= 1")
        if not 0 < self.scale_s <= 1:
            raise ValueError("scale_s must lie in (0, 1]")
        if self.d_active < 1 or self.d_pad < 0:
            raise ValueError("d_active >= 1 and d_pad >= 0 required")


@dataclass(frozen=True)
class MultiSourceScheme:
    """Three correlated source vectors and a target aligned with their mix."""

    weights: tuple = (1.0, -0.5, 0.2)
    varrho: float = 0.9
    rho: float = 0.8
    d_active: int = 50
    d_pad: int = 100
    sigma2: float = 0.4

    def __post_init__(self):
        if len(self.weights) != 3:
            raise ValueError("weights must have three entries")
        if not abs(self.varrho) <= 1 or not abs(self.rho) <= 1:
            raise ValueError("correlations must lie in [-1, 1]")
        if self.varrho < -0.5:
            raise ValueError("three equicorrelated sources need varrho >= -1/2")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")


def _pad(v, d_pad):
    return np.concatenate([v, np.zeros(d_pad)])


def gen_coef_pair(scheme: CoefScheme, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(beta, theta)`` with per-component correlation ``rho``.

    ``theta = sigma z1`` and ``beta = s sigma (rho z1 + sqrt(1 - rho^2) z2)``;
    theta does not depend on ``rho``.
    """
    rng = _rng(seed)
    sd = math.sqrt(scheme.sigma2)
    z = rng.standard_normal((2, scheme.d_active))
    theta = sd * z[0]
    beta = sd * (scheme.rho * z[0] + math.sqrt(1.0 - scheme.rho ** 2) * z[1])
    beta = scheme.scale_s * beta
    return _pad(beta, scheme.d_pad), _pad(theta, scheme.d_pad)


def gen_multisource(scheme: MultiSourceScheme, seed):
    """Draw ``(beta, theta1, theta2, theta3)``.

    The sources are equicorrelated with correlation ``varrho`` and variance
    ``sigma2``; ``beta = rho theta_S + eps`` with ``theta_S`` the weighted mix
    and ``Var(eps) = (1 - rho^2)`` times the entry variance of ``theta_S``,
    rescaled to the length of ``theta_S``.
    """
    rng = _rng(seed)
    sd = math.sqrt(scheme.sigma2)
    k = scheme.d_active
    z = rng.standard_normal((4, k))
    vr = scheme.varrho
    if vr >= 0:
        thetas = sd * (math.sqrt(vr) * z[0] + math.sqrt(1.0 - vr) * z[1:])
    else:
        C = (1.0 - vr) * np.eye(3) + vr * np.ones((3, 3))
        lam, V = np.linalg.eigh(C)
        thetas = sd * ((V * np.sqrt(np.maximum(lam, 0.0))) @ z[1:])
    a, b, c = scheme.weights
    theta_s = a * thetas[0] + b * thetas[1] + c * thetas[2]
    norm_s = np.linalg.norm(theta_s)
    if norm_s == 0:
        raise ValueError("the source mix theta_S is zero")
    eps_sd = math.sqrt((1.0 - scheme.rho ** 2) * float(np.var(theta_s)))
    beta = scheme.rho * theta_s + eps_sd * rng.standard_normal(k)
    nb = np.linalg.norm(beta)
    if nb == 0:
        raise ValueError("degenerate draw: beta is zero")
    beta = beta * (norm_s / nb)
    return (_pad(beta, scheme.d_pad),) + tuple(_pad(t, scheme.d_pad) for t in thetas)


def equicorrelated_normal(rng, n, d, c):
    """Rows i.i.d. ``N(0, (1 - c) I + c 11')`` via one shared factor."""
    if not 0 <= c < 1:
        raise ValueError("equicorrelation must lie in [0, 1)")
    Z = rng.standard_normal((n, d))
    g = rng.standard_normal((n, 1))
    return math.sqrt(1.0 - c) * Z + math.sqrt(c) * g


def gen_linear_data(beta, N: int, corr: float, noise_sd: float, seed) -> Dataset:
    """``y = X beta + noise_sd * e`` with equicorrelated Gaussian covariates."""
    rng = _rng(seed)
    beta = np.asarray(beta, dtype=float)
    X = equicorrelated_normal(rng, N, beta.size, corr)
    e = rng.standard_normal(N)
    return Dataset(X, X @ beta + noise_sd * e, Task.REGRESSION)


def gen_logistic_data(beta, N: int, seed) -> Dataset:
    """Uniform ``[-2, 2]`` covariates and Bernoulli labels mapped 1 -> +1, 0 -> -1."""
    rng = _rng(seed)
    beta = np.asarray(beta, dtype=float)
    X = rng.uniform(-2.0, 2.0, size=(N, beta.size))
    u = rng.uniform(size=N)
    y = np.where(u < expit(X @ beta), 1.0, -1.0)
    return Dataset(X, y, Task.CLASSIFICATION)


class SimId(str, enum.Enum):
    SIM1 = "1"
    SIM2 = "2"
    SIM3 = "3"

    @classmethod
    def parse(cls, value) -> "SimId":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().removeprefix("sim"))


# methods produced by this package; the external ones are reserved columns
_EXTERNAL = {SimId.SIM1: "Trans-GLM", SimId.SIM2: "Trans-Ridge", SimId.SIM3: "Trans-Lasso"}


@dataclass(frozen=True)
class SimConfig:
    sim_id: SimId
    N: int
    rhos: tuple
    reps: int = 50
    seed: int = 0
    scale_s: float = 1.0
    source_N: int = 800
    test_N: int = 5000
    sigma2: float | None = None
    d_active: int | None = None
    d_pad: int | None = None
    corr: float | None = None
    noise_sd: float = math.sqrt(0.5)
    weights: tuple = (1.0, -0.5, 0.2)
    varrho: float = 0.9
    grid1: tuple = ()  # (lo, hi, n)
    grid2: tuple = ()
    lambda_inv_grid: tuple = ()
    methods: tuple = ()
    tol: float = 1e-7
    max_iter: int = 5000
    jobs: int = 1

    def __post_init__(self):
        sid = SimId.parse(self.sim_id)
        object.__setattr__(self, "sim_id", sid)
        defaults = _DEFAULTS[sid]
        for name, value in defaults.items():
            if getattr(self, name) in (None, ()):
                object.__setattr__(self, name, value)
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        for name in ("N", "reps", "source_N", "test_N", "jobs", "max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.rhos:
            raise ValueError("need at least one rho")
        bad = set(self.methods) - set(defaults["methods"])
        if bad:
            raise ValueError(f"unknown methods for sim {sid.value}: {sorted(bad)}")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(tol=self.tol, max_iter=self.max_iter)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sim_id"] = self.sim_id.value
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        out.pop("jobs")  # execution detail; results do not depend on it
        return out


_DEFAULTS = {
    SimId.SIM1: dict(sigma2=0.4, d_active=50, d_pad=100, grid1=(1e-4, 1.0, 10),
                     grid2=(1e-4, 2.0, 20), methods=("KG", "WDRO", "KG-constrained")),
    SimId.SIM2: dict(sigma2=0.1, d_active=100, d_pad=0, corr=0.3, grid1=(1e-4, 1.0, 10),
                     grid2=(1e-4, 1.5, 20), lambda_inv_grid=(1e-4, 8.0, 20),
                     methods=("KG-strong", "KG-weak", "WDRO", "KG-constrained")),
    SimId.SIM3: dict(sigma2=0.4, d_active=50, d_pad=100, corr=0.1, grid1=(1e-4, 1.0, 15),
                     grid2=(1e-4, 3.0, 20), methods=("KG", "WDRO", "KG-constrained")),
}


def default_config(sim_id, **kw) -> SimConfig:
    """Table-row settings for a simulation; keyword arguments override."""
    sid = SimId.parse(sim_id)
    base = {
        SimId.SIM1: dict(N=20, rhos=(0.3, 0.5, 0.7, 0.8, 0.9, 0.95)),
        SimId.SIM2: dict(N=50, rhos=(0.3, 0.5, 0.7, 0.8, 0.9, 0.95)),
        SimId.SIM3: dict(N=50, rhos=(0.7, 0.75, 0.8, 0.85, 0.9, 0.95)),
    }[sid]
    base.update(kw)
    return SimConfig(sim_id=sid, **base)


def _grid(spec) -> Grid:
    return make_log_grid(*spec)


# --- one repetition ----------------------------------------------------------------

def _select_fit(train, val, spec, grids):
    rep = grid_search(train, val, spec, grids)
    return rep.best_fit.beta, rep


def _rep_sim12(cfg: SimConfig, rep: int) -> dict:
    sid = cfg.sim_id
    solver = cfg.solver
    seeds = {k: [cfg.seed, rep, k] for k in (_COEF, _SOURCE, _TRAIN, _VAL, _TEST)}
    coef_rng_seed = seeds[_COEF]
    scheme0 = CoefScheme(cfg.d_active, cfg.d_pad, cfg.sigma2, 0.0, cfg.scale_s)
    _, theta = gen_coef_pair(scheme0, coef_rng_seed)
    d = theta.size
    g1, g2 = _grid(cfg.grid1), _grid(cfg.grid2)

    if sid is SimId.SIM1:
        def data(beta, n, stream, k=0):
            return gen_logistic_data(beta, n, seeds[stream] + [k])
        vanilla = FitSpec("classifier_strong", PriorSpan.empty(d), p=1, loss=Loss.LOGISTIC, cfg=solver)
        loss = Loss.LOGISTIC
    else:
        def data(beta, n, stream, k=0):
            return gen_linear_data(beta, n, cfg.corr, cfg.noise_sd, seeds[stream] + [k])
        vanilla = FitSpec("linear_strong", PriorSpan.empty(d), p=2, cfg=solver)
        loss = Loss.SQRT_LINEAR

    # source prior: vanilla fit on source data, grid1 on a source validation set
    src_train = data(theta, cfg.source_N, _SOURCE, 0)
    src_val = data(theta, cfg.source_N, _SOURCE, 1)
    theta_hat, _ = _select_fit(src_train, src_val, vanilla, {"delta": g1})
    if not np.any(theta_hat):
        raise RuntimeError("the source fit returned a zero prior")
    span = PriorSpan([theta_hat])

    scores = {}
    for rho in cfg.rhos:
        scheme = CoefScheme(cfg.d_active, cfg.d_pad, cfg.sigma2, rho, cfg.scale_s)
        beta, _ = gen_coef_pair(scheme, coef_rng_seed)
        train, val, test = data(beta, cfg.N, _TRAIN), data(beta, cfg.N, _VAL), data(beta, cfg.test_N, _TEST)
        row = {}
        for method in cfg.methods:
            if method == "WDRO":
                b, _ = _select_fit(train, val, vanilla, {"delta": g1})
            elif method in ("KG", "KG-strong"):
                spec = (FitSpec("classifier_strong", span, p=1, loss=loss, cfg=solver)
                        if sid is SimId.SIM1 else FitSpec("linear_strong", span, p=2, cfg=solver))
                b, _ = _select_fit(train, val, spec, {"delta": g2})
            elif method == "KG-weak":
                spec = FitSpec("linear_weak", theta=theta_hat, cfg=solver)
                b, _ = _select_fit(train, val, spec,
                                   {"delta": g2, "lambda_inv": _grid(cfg.lambda_inv_grid)})
            else:  # KG-constrained: the infinite-radius limit
                b = fit_span_constrained(train, span, loss, solver).beta
            row[method] = score(b, test)
        scores[repr(rho)] = row
    return scores


def _rep_sim3(cfg: SimConfig, rep: int) -> dict:
    solver = cfg.solver
    seeds = {k: [cfg.seed, rep, k] for k in (_COEF, _SOURCE, _TRAIN, _VAL, _TEST)}
    g1, g2 = _grid(cfg.grid1), _grid(cfg.grid2)

    def data(beta, n, stream, k=0):
        return gen_linear_data(beta, n, cfg.corr, cfg.noise_sd, seeds[stream] + [k])

    scheme0 = MultiSourceScheme(cfg.weights, cfg.varrho, 0.0, cfg.d_active, cfg.d_pad, cfg.sigma2)
    _, *thetas = gen_multisource(scheme0, seeds[_COEF])
    d = thetas[0].size
    vanilla = FitSpec("linear_strong", PriorSpan.empty(d), p=1, cfg=solver)
    priors = []
    for m, th in enumerate(thetas):
        tr = data(th, cfg.source_N, _SOURCE, 2 * m)
        va = data(th, cfg.source_N, _SOURCE, 2 * m + 1)
        t_hat, _ = _select_fit(tr, va, vanilla, {"delta": g1})
        priors.append(t_hat)
    span = PriorSpan(priors, d=d)
    if span.rank() >= d:
        raise RuntimeError("source priors span the whole space")

    scores = {}
    for rho in cfg.rhos:
        scheme = MultiSourceScheme(cfg.weights, cfg.varrho, rho, cfg.d_active, cfg.d_pad, cfg.sigma2)
        beta = gen_multisource(scheme, seeds[_COEF])[0]
        train, val, test = data(beta, cfg.N, _TRAIN), data(beta, cfg.N, _VAL), data(beta, cfg.test_N, _TEST)
        row = {}
        for method in cfg.methods:
            if method == "WDRO":
                b, _ = _select_fit(train, val, vanilla, {"delta": g1})
            elif method == "KG":
                b, _ = _select_fit(train, val, FitSpec("linear_strong", span, p=1, cfg=solver),
                                   {"delta": g2})
            else:
                b = fit_span_constrained(train, span, Loss.SQRT_LINEAR, solver).beta
            row[method] = score(b, test)
        scores[repr(rho)] = row
    return scores


def run_one_rep(cfg: SimConfig, rep: int) -> dict:
    """Scores of every method and rho for repetition ``rep``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.sim_id is SimId.SIM3:
            return _rep_sim3(cfg, rep)
        return _rep_sim12(cfg, rep)


def _safe_rep(args):
    cfg, rep = args
    t0 = time.perf_counter()
    try:
        return rep, run_one_rep(cfg, rep), None, time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001 - a failed rep is recorded, not fatal
        return rep, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


# --- report ----------------------------------------------------------------------

@dataclass
class SimReport:
    """Cell means and standard errors over the successful repetitions.

    ``runtime`` is kept out of :meth:`to_dict` and the CSV so that reruns
    produce byte-identical primary output.
    """

    config: SimConfig
    cells: list  # dicts: method, rho, mean, stderr, reps, failures
    failures: list  # (rep, message)
    per_rep: dict  # rep -> scores
    runtime: dict = field(default_factory=dict)

    @property
    def n_success(self) -> int:
        return len(self.per_rep)

    def cell(self, method: str, rho: float) -> dict:
        for c in self.cells:
            if c["method"] == method and c["rho"] == float(rho):
                return c
        raise KeyError((method, rho))

    def means(self, method: str) -> list:
        return [self.cell(method, r)["mean"] for r in self.config.rhos]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "cells": self.cells,
            "n_success": self.n_success,
            "failures": [{"rep": r, "error": m} for r, m in self.failures],
            "per_rep": {str(k): v for k, v in sorted(self.per_rep.items())},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "rho", "mean", "stderr", "reps", "failures"])
        for c in self.cells:
            w.writerow([c["method"], repr(c["rho"]),
                        "" if c["mean"] is None else repr(c["mean"]),
                        "" if c["stderr"] is None else repr(c["stderr"]),
                        c["reps"], c["failures"]])
        return buf.getvalue()


def _aggregate(cfg: SimConfig, per_rep: dict, failures: list) -> list:
    cells = []
    reps = sorted(per_rep)
    for method in list(cfg.methods) + [_EXTERNAL[cfg.sim_id]]:
        for rho in cfg.rhos:
            if method == _EXTERNAL[cfg.sim_id]:
                cells.append(dict(method=method, rho=rho, mean=None, stderr=None,
                                  reps=0, failures=0, external=True))
                continue
            vals = np.array([per_rep[r][repr(rho)][method] for r in reps], dtype=float)
            # math.fsum keeps the mean independent of summation order
            mean = math.fsum(vals) / vals.size if vals.size else None
            if vals.size > 1:
                ss = math.fsum((vals - mean) ** 2)
                se = math.sqrt(ss / (vals.size - 1)) / math.sqrt(vals.size)
            else:
                se = None
            cells.append(dict(method=method, rho=rho, mean=mean, stderr=se,
                              reps=int(vals.size), failures=len(failures), external=False))
    return cells


def run_simulation(cfg: SimConfig, rep_order=None, progress=None) -> SimReport:
    """Run ``cfg.reps`` repetitions and aggregate the test scores.

    ``rep_order`` permutes execution (results are unaffected); ``progress`` is
    called with ``(done, total, rep, seconds, error)`` after each rep.
    """
    order = list(range(cfg.reps)) if rep_order is None else list(rep_order)
    if sorted(order) != list(range(cfg.reps)):
        raise ValueError("rep_order must be a permutation of range(reps)")
    per_rep, failures, times = {}, [], {}
    t0 = time.perf_counter()
    jobs = max(1, min(cfg.jobs, os.cpu_count() or 1, len(order)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = ex.map(_safe_rep, [(cfg, r) for r in order])
            outcomes = list(_tick(results, len(order), progress))
    else:
        outcomes = list(_tick(map(_safe_rep, [(cfg, r) for r in order]), len(order), progress))
    for rep, scores, err, secs in outcomes:
        times[rep] = secs
        if err is None:
            per_rep[rep] = scores
        else:
            log.warning("rep %d failed: %s", rep, err)
            failures.append((rep, err))
    failures.sort()
    cells = _aggregate(cfg, per_rep, failures)
    runtime = {"total_seconds": time.perf_counter() - t0,
               "rep_seconds": [times[r] for r in sorted(times)]}
    return SimReport(config=cfg, cells=cells, failures=failures, per_rep=per_rep, runtime=runtime)


def _tick(results, total, progress):
    for i, out in enumerate(results, 1):
        if progress is not None:
            progress(i, total, out[0], out[3], out[2])
        yield out
