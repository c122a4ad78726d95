import numpy as np
import pytest

from kgwdro import simulation as sim
from kgwdro.simulation import (
    CoefScheme,
    MultiSourceScheme,
    SimConfig,
    SimId,
    default_config,
    gen_coef_pair,
    gen_linear_data,
    gen_logistic_data,
    gen_multisource,
    run_simulation,
)


def majority(checks):
    return sum(checks) > len(checks) / 2


def test_coef_pair_rho_one_and_padding():
    beta, theta = gen_coef_pair(CoefScheme(d_active=30, d_pad=20, rho=1.0), 3)
    assert np.array_equal(beta, theta)
    assert not np.any(beta[30:]) and not np.any(theta[30:])
    assert beta.size == 50


def test_coef_pair_scale_and_validation():
    b1, t1 = gen_coef_pair(CoefScheme(rho=0.5, scale_s=1.0), 1)
    b2, t2 = gen_coef_pair(CoefScheme(rho=0.5, scale_s=0.25), 1)
    assert np.array_equal(t1, t2) and b2 == pytest.approx(0.25 * b1)
    for bad in (dict(sigma2=0), dict(rho=1.5), dict(scale_s=0)):
        with pytest.raises(ValueError):
            CoefScheme(**bad)


def test_coef_pair_uncorrelated_at_rho_zero():
    checks = []
    for seed in range(5):
        b, t = gen_coef_pair(CoefScheme(d_active=5000, d_pad=0, rho=0.0), seed)
        checks.append(abs(np.corrcoef(b, t)[0, 1]) < 0.1)
    assert majority(checks)


def test_multisource_examples():
    beta, t1, t2, t3 = gen_multisource(MultiSourceScheme(weights=(1, 1, 1), varrho=1.0, rho=0.5,
                                                         d_active=40, d_pad=10), 0)
    assert t1 == pytest.approx(t2) and t2 == pytest.approx(t3)
    beta, t1, t2, t3 = gen_multisource(MultiSourceScheme(rho=1.0, d_active=40, d_pad=10), 0)
    ts = t1 - 0.5 * t2 + 0.2 * t3
    assert np.linalg.norm(beta) == pytest.approx(np.linalg.norm(ts))
    assert beta == pytest.approx(ts) or beta == pytest.approx(-ts)
    assert not np.any(beta[40:])
    with pytest.raises(ValueError):
        gen_multisource(MultiSourceScheme(weights=(0, 0, 0)), 0)


def test_multisource_correlation():
    checks = []
    for seed in range(5):
        beta, t1, t2, t3 = gen_multisource(MultiSourceScheme(rho=0.7, d_active=2000, d_pad=0), seed)
        ts = t1 - 0.5 * t2 + 0.2 * t3
        checks.append(abs(np.corrcoef(beta, ts)[0, 1] - 0.7) < 0.05)
    assert majority(checks)


def test_multisource_negative_varrho():
    _, t1, t2, _ = gen_multisource(MultiSourceScheme(varrho=-0.4, d_active=4000, d_pad=0), 2)
    assert np.corrcoef(t1, t2)[0, 1] == pytest.approx(-0.4, abs=0.05)


def test_linear_data_covariance():
    checks = []
    for seed in range(3):
        D = gen_linear_data(np.zeros(10), 20000, 0.0, 1.0, seed)
        C = np.cov(D.X, rowvar=False)
        checks.append(np.max(np.abs(C - np.diag(np.diag(C)))) < 0.05)
    assert majority(checks)
    D = gen_linear_data(np.zeros(100), 20000, 0.3, 1.0, 0)
    R = np.corrcoef(D.X, rowvar=False)
    assert R[~np.eye(100, dtype=bool)].mean() == pytest.approx(0.3, abs=0.02)
    b = np.arange(5.0)
    D = gen_linear_data(b, 50, 0.3, 0.0, 1)
    assert np.array_equal(D.y, D.X @ b)
    with pytest.raises(ValueError):
        gen_linear_data(b, 10, 1.0, 1.0, 0)


def test_logistic_data():
    D = gen_logistic_data(np.zeros(5), 10000, 0)
    assert abs(D.y.mean()) < 0.03
    assert D.X.min() >= -2 and D.X.max() <= 2
    b = np.zeros(5)
    b[2] = 1e4
    D = gen_logistic_data(b, 2000, 1)
    assert np.mean(np.sign(D.X[:, 2]) == D.y) > 0.99


def test_config_defaults_and_validation():
    cfg = default_config(3)
    assert cfg.rhos == (0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    assert cfg.sigma2 == 0.4 and cfg.N == 50
    assert default_config("sim1").sim_id is SimId.SIM1
    with pytest.raises(ValueError):
        SimConfig(sim_id=1, N=20, rhos=(0.5,), methods=("nope",))
    with pytest.raises(ValueError):
        SimConfig(sim_id=1, N=0, rhos=(0.5,))
    assert "jobs" not in cfg.to_dict()


def small(sim_id, **kw):
    base = dict(reps=2, seed=11, source_N=120, test_N=300)
    base.update(kw)
    if sim_id == 1:
        base.update(grid1=(1e-3, 1.0, 3), grid2=(1e-3, 1.0, 3))
    elif sim_id == 2:
        base.update(grid1=(1e-3, 1.0, 3), grid2=(1e-3, 1.0, 3), lambda_inv_grid=(0.1, 8.0, 2))
    else:
        base.update(grid1=(1e-3, 1.0, 3), grid2=(1e-3, 1.0, 3))
    return default_config(sim_id, **base)


@pytest.mark.parametrize("sim_id", [1, 2, 3])
def test_run_is_deterministic_and_order_free(sim_id):
    cfg = small(sim_id, rhos=(0.9,))
    a = run_simulation(cfg)
    b = run_simulation(cfg, rep_order=[1, 0])
    assert a.to_dict() == b.to_dict()
    assert a.to_csv() == b.to_csv()
    assert a.n_success == 2 and not a.failures
    for m in cfg.methods:
        assert a.cell(m, 0.9)["reps"] == 2


def test_report_layout():
    cfg = small(1, rhos=(0.5, 0.9), reps=1)
    rep = run_simulation(cfg)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "method,rho,mean,stderr,reps,failures"
    assert len(lines) == 1 + 2 * (len(cfg.methods) + 1)
    ext = rep.cell("Trans-GLM", 0.5)
    assert ext["mean"] is None and ext["external"]
    assert len(rep.means("KG")) == 2
    assert "total_seconds" in rep.runtime and "runtime" not in rep.to_dict()


def test_rep_failures_are_recorded(monkeypatch):
    real = sim.run_one_rep

    def flaky(cfg, rep):
        if rep == 1:
            raise RuntimeError("boom")
        return real(cfg, rep)

    monkeypatch.setattr(sim, "run_one_rep", flaky)
    rep = run_simulation(small(1, rhos=(0.9,), reps=2))
    assert rep.n_success == 1
    assert rep.failures[0][0] == 1 and "boom" in rep.failures[0][1]
    assert rep.cell("KG", 0.9)["reps"] == 1 and rep.cell("KG", 0.9)["failures"] == 1


def test_parallel_matches_serial():
    cfg = small(1, rhos=(0.9,))
    par = run_simulation(SimConfig(**{**cfg.__dict__, "jobs": 2}))
    assert par.to_dict() == run_simulation(cfg).to_dict()
