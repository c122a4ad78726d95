"""Acceptance suite: one test per numbered criterion, each printing PASS/FAIL.

Run alone with ``pytest tests/test_acceptance.py -v``; the three simulation
criteria (10-12) take several minutes together and carry the ``slow`` marker.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from kgwdro import (
    Dataset,
    PriorSpan,
    PsiMatrix,
    SolverConfig,
    Status,
    fit_classifier_strong,
    fit_linear_strong,
    fit_linear_weak,
    fit_mahalanobis,
    logistic_loss,
    mse_n,
    psi_norm,
    span_distance,
    span_distance_p2_closed,
    sqrt_mse,
)
from kgwdro.simulation import default_config, run_simulation

from helpers import classification_data, regression_data
from oracles import central_diff, constrained_regression, newton_logistic, perp_norm, pnorm, scaled_lasso


@pytest.fixture
def verdict(capsys):
    def _verdict(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return _verdict


def test_criterion_01_closed_form_equivalence(verdict):
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(200):
        d = int(rng.integers(2, 21))
        pairs.append((rng.standard_normal(d), rng.standard_normal(d)))
    t0 = time.perf_counter()
    worst = max(abs(span_distance(b, PriorSpan([t]), 2)[0] - span_distance_p2_closed(b, t))
                for b, t in pairs)
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-8 and elapsed < 1.0, f"max gap {worst:.2e}, {elapsed:.3f}s")


def test_criterion_02_lasso_type_pattern(verdict):
    rng = np.random.default_rng(2)
    S = PriorSpan([[1.0, 0.0, 0.0]])
    exact = 0
    for _ in range(100):
        b = rng.standard_normal(3) * 5
        exact += span_distance(b, S, 1)[0] == abs(b[1]) + abs(b[2])
    verdict(2, exact == 100, f"{exact}/100 exact")


def test_criterion_03_psi_spectrum(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 21))
        theta = rng.standard_normal(d)
        for a in (0.0, 0.1, 2.0, 1e6):
            ev = np.linalg.eigvalsh(PsiMatrix(theta, a).toarray())
            expect = np.sort(np.r_[np.ones(d - 1), a / (theta @ theta + a)])
            worst = max(worst, float(np.max(np.abs(ev - expect))))
    verdict(3, worst < 1e-10, f"max eigenvalue error {worst:.2e}")


def test_criterion_04_limit_chain(verdict):
    rng = np.random.default_rng(4)
    gap_lo = gap_hi = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 21))
        b, t = rng.standard_normal(d), rng.standard_normal(d)
        gap_lo = max(gap_lo, abs(psi_norm(b, t, 1e-8) - perp_norm(b, t)))
        gap_hi = max(gap_hi, abs(psi_norm(b, t, 1e8) - np.linalg.norm(b)))
    # a = 1/lambda = 1e8 is the ridge end of the chain: the p = 2 fit with no prior
    # vector; the a -> 0 end is the p = 2 fit with the prior span {theta}
    fit_hi = fit_lo = 0.0
    for _ in range(20):
        D, beta = regression_data(rng, 50, 10)
        theta = beta + 0.5 * rng.standard_normal(10)
        delta = float(10 ** rng.uniform(-3, 0))
        ridge = fit_linear_strong(D, PriorSpan.empty(10), 2, delta)
        strong = fit_linear_strong(D, PriorSpan([theta]), 2, delta)
        fit_hi = max(fit_hi, np.max(np.abs(fit_linear_weak(D, theta, 1e8, delta).beta - ridge.beta)))
        fit_lo = max(fit_lo, np.max(np.abs(fit_linear_weak(D, theta, 1e-8, delta).beta - strong.beta)))
    ok = gap_lo < 1e-4 and gap_hi < 1e-4 and fit_hi < 1e-3 and fit_lo < 1e-3
    verdict(4, ok, f"psi gaps {gap_lo:.1e}/{gap_hi:.1e}; weak(a=1e8) vs p=2 strong "
                   f"{fit_hi:.1e}; weak(a=1e-8) vs p=2 strong on span {fit_lo:.1e}")


def test_criterion_05_baseline_degeneracy(verdict):
    rng = np.random.default_rng(5)
    worst_rel = 0.0
    for _ in range(20):
        D, _ = regression_data(rng, 50, 10)
        delta = float(10 ** rng.uniform(-3, -1))
        res = fit_linear_strong(D, PriorSpan.empty(10), 1, delta)
        _, ref = scaled_lasso(D.X, D.y, math.sqrt(delta))
        worst_rel = max(worst_rel, abs(math.sqrt(res.objective) - ref) / ref)
    worst_mle = 0.0
    for _ in range(20):
        D, _ = classification_data(rng, 200, 5, flip=0.25)
        res = fit_classifier_strong(D, PriorSpan.empty(5), 2, 0.0, "logistic")
        worst_mle = max(worst_mle, np.max(np.abs(res.beta - newton_logistic(D.X, D.y))))
    verdict(5, worst_rel < 1e-6 and worst_mle < 1e-4,
            f"sqrt-lasso objective rel gap {worst_rel:.1e}; logistic MLE gap {worst_mle:.1e}")


def test_criterion_06_large_delta_collapse(verdict):
    rng = np.random.default_rng(6)
    worst_dist = worst_mse = 0.0
    for M in (1, 2):
        for p in (1, 2, "inf"):
            for _ in range(3):
                D, beta = regression_data(rng, 40, 10)
                T = beta[:, None] + 0.5 * rng.standard_normal((10, M))
                res = fit_linear_strong(D, PriorSpan(T), p, 1e6)
                dist, _ = span_distance(res.beta, PriorSpan(T), p)
                worst_dist = max(worst_dist, dist / max(1.0, pnorm(res.beta, p)))
                ref = constrained_regression(D.X, D.y, T)
                worst_mse = max(worst_mse, abs(mse_n(res.beta, D) - mse_n(ref, D)))
    verdict(6, worst_dist < 1e-4 and worst_mse < 1e-4,
            f"relative span distance {worst_dist:.1e}; MSE gap {worst_mse:.1e}")


def test_criterion_07_prior_rescaling(verdict):
    rng = np.random.default_rng(7)
    cfg = SolverConfig()
    worst = 0.0
    for i in range(20):
        D, beta = regression_data(rng, 40, 8)
        theta = beta + rng.standard_normal(8)
        p = (1, 2, "inf")[i % 3]
        a = fit_linear_strong(D, PriorSpan([theta]), p, 0.05, cfg)
        b = fit_linear_strong(D, PriorSpan([5 * theta]), p, 0.05, cfg)
        worst = max(worst, np.max(np.abs(a.beta - b.beta)))
        C, beta = classification_data(rng, 60, 8)
        theta = beta + rng.standard_normal(8)
        a = fit_classifier_strong(C, PriorSpan([theta]), p, 0.05, "logistic", cfg)
        b = fit_classifier_strong(C, PriorSpan([5 * theta]), p, 0.05, "logistic", cfg)
        worst = max(worst, np.max(np.abs(a.beta - b.beta)))
    verdict(7, worst <= 2 * cfg.tol, f"max |beta diff| {worst:.1e} (bound {2 * cfg.tol:.0e})")


def test_criterion_08_gradient_checks(verdict):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        C, _ = classification_data(rng, 20, 5)
        R, _ = regression_data(rng, 20, 5)
        b = rng.standard_normal(5)
        for f, g in ((lambda v: logistic_loss(v, C).value, logistic_loss(b, C).grad),
                     (lambda v: sqrt_mse(v, R).value, sqrt_mse(b, R).grad)):
            fd = central_diff(f, b)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    verdict(8, worst < 1e-5, f"max relative error {worst:.1e}")


def test_criterion_09_solver_certification(verdict):
    rng = np.random.default_rng(9)
    bad, counts = [], {"converged": 0, "perfect_fit": 0, "max_iter": 0}
    for i in range(200):
        d = int(rng.integers(2, 31))
        N = int(rng.integers(5, 80))
        X = rng.standard_normal((N, d))
        b = rng.standard_normal(d)
        M = int(rng.integers(0, min(3, d - 1) + 1))
        S = PriorSpan([b + rng.standard_normal(d) for _ in range(M)], d=d)
        p = (1, 2, "inf")[int(rng.integers(3))]
        delta = float(10 ** rng.uniform(-4, 1))
        op = i % 4
        regression = op in (0, 1) or (op == 3 and i % 8 == 3)
        if regression:
            D = Dataset(X, X @ b + rng.standard_normal(N))
        else:
            D = Dataset(X, np.where(X @ b + rng.standard_normal(N) > 0, 1.0, -1.0), "classification")
        if op == 0:
            r = fit_linear_strong(D, S, p, delta)
        elif op == 1:
            r = fit_linear_weak(D, b + rng.standard_normal(d), float(10 ** rng.uniform(-3, 3)), delta)
        elif op == 2:
            r = fit_classifier_strong(D, S, p, delta, ("logistic", "hinge")[(i // 4) % 2])
        else:
            loss = "sqrt_linear" if regression else ("logistic", "hinge")[(i // 8) % 2]
            r = fit_mahalanobis(D, S, np.diag(rng.uniform(0.2, 3, d)), delta, loss)
        counts[r.status.value] += 1
        monotone = all(y <= x for x, y in zip(r.trace, r.trace[1:]))
        if (r.status is Status.CONVERGED and r.kkt_residual > 1e-8) or not monotone:
            bad.append((i, r.status.value, r.kkt_residual, monotone))
    verdict(9, not bad, f"{counts}; violations {bad[:5]}")


@pytest.mark.slow
def test_criterion_10_logistic_cell(verdict):
    cfg = default_config(1, N=20, scale_s=1.0, rhos=(0.95,), reps=50, seed=7)
    rep = run_simulation(cfg)
    kg, wdro = rep.cell("KG", 0.95)["mean"], rep.cell("WDRO", 0.95)["mean"]
    ok = abs(kg - 0.817) <= 0.03 and abs(wdro - 0.565) <= 0.04 and rep.n_success == 50
    verdict(10, ok, f"KG {kg:.4f} (0.817 +/- 0.03), WDRO {wdro:.4f} (0.565 +/- 0.04), "
                    f"{rep.runtime['total_seconds']:.0f}s")


@pytest.mark.slow
def test_criterion_11_linear_strong_cell(verdict):
    cfg = default_config(2, N=50, scale_s=1.0, rhos=(0.3,), reps=50, seed=7,
                         methods=("KG-strong", "WDRO"))
    rep = run_simulation(cfg)
    kg, wdro = rep.cell("KG-strong", 0.3)["mean"], rep.cell("WDRO", 0.3)["mean"]
    ok = abs(kg - 0.585) <= 0.05 and kg - wdro > 0.3 and rep.n_success == 50
    verdict(11, ok, f"KG-strong {kg:.4f} (0.585 +/- 0.05), WDRO {wdro:.4f}, gap {kg - wdro:.4f} "
                    f"(needs > 0.3), {rep.runtime['total_seconds']:.0f}s")


@pytest.mark.slow
def test_criterion_12_multisource_trend(verdict):
    cfg = default_config(3, N=50, weights=(1.0, -0.5, 0.2), varrho=0.9, reps=50, seed=7,
                         methods=("KG", "WDRO"))
    rep = run_simulation(cfg)
    kg, wdro = rep.means("KG"), rep.means("WDRO")
    rho_s = spearmanr(cfg.rhos, kg).statistic
    ok = rho_s >= 0.9 and all(k > w for k, w in zip(kg, wdro)) and rep.n_success == 50
    verdict(12, ok, f"KG {np.round(kg, 3).tolist()}, WDRO {np.round(wdro, 3).tolist()}, "
                    f"Spearman {rho_s:.2f}, {rep.runtime['total_seconds']:.0f}s")


def test_criterion_13_determinism(verdict, tmp_path):
    from kgwdro.io import write_dataset, write_thetas

    rng = np.random.default_rng(13)
    D, beta = regression_data(rng, 30, 6)
    write_dataset(tmp_path / "d.csv", D)
    write_thetas(tmp_path / "t.csv", (beta + rng.standard_normal(6))[:, None])
    cmds = {
        "fit": ["fit", "--task", "linreg-strong", "--data", "d.csv", "--theta", "t.csv",
                "--p", "1", "--delta", "0.05"],
        "simulate": ["simulate", "--sim", "1", "--reps", "2", "--seed", "13", "--rho-list", "0.9",
                     "-q"],
    }
    same = {}
    for name, argv in cmds.items():
        outs = [subprocess.run([sys.executable, "-m", "kgwdro.cli", *argv], cwd=tmp_path,
                               capture_output=True, check=True).stdout for _ in range(2)]
        same[name] = outs[0] == outs[1] and len(outs[0]) > 0
    verdict(13, all(same.values()), f"byte-identical reruns: {same}")
