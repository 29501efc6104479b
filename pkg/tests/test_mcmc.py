import csv
import math

import numpy as np
import pytest
from scipy import stats

from chrom_oed.backends import SurrogateBackend
from chrom_oed.mcmc import (Chain, DramConfig, DramError, chain_summary, dram_run, iact,
                            log_posterior, make_log_posterior, summary_to_json)
from chrom_oed.model import DesignPoint, ObservationSchedule, ParamBox
from chrom_oed.surrogate import eval_observation

BOX = ParamBox()
D = DesignPoint(1.2, 9.0)
SCHED = ObservationSchedule.equidistant(8, sigma=0.05)


def gaussian_target(mean, cov):
    mean = np.asarray(mean, dtype=float)
    prec = np.linalg.inv(cov)

    def target(x):
        r = x - mean
        return -0.5 * float(r @ prec @ r)

    return target


def plain_config(dim, n_iter, burn_in, seed=0, scale=1.0, **kw):
    return DramConfig(n_iter=n_iter, burn_in=burn_in, x0=tuple(np.zeros(dim)),
                      cov0=tuple(map(tuple, scale * np.eye(dim))), seed=seed, **kw)


# -- posterior ----------------------------------------------------------------

def test_log_posterior_outside_box(tiny_surrogate):
    model, _ = tiny_surrogate
    y = np.zeros(SCHED.size)
    outside = BOX.midpoint.copy()
    outside[2] = BOX.hi[2] + 1.0
    assert log_posterior(outside, y, SCHED, D, SurrogateBackend(model), BOX) == -math.inf
    assert make_log_posterior(y, SCHED, D, SurrogateBackend(model), BOX)(outside) == -math.inf


def test_noiseless_truth_has_zero_log_posterior(tiny_surrogate):
    model, _ = tiny_surrogate
    theta = BOX.lo + 0.4 * BOX.width
    y = eval_observation(model, theta, D, SCHED)
    assert log_posterior(theta, y, SCHED, D, SurrogateBackend(model), BOX) == 0.0


def test_log_posterior_ratio_oracle(tiny_surrogate):
    model, _ = tiny_surrogate
    be = SurrogateBackend(model)
    rng = np.random.default_rng(0)
    y = rng.normal(0, 1, SCHED.size)
    target = make_log_posterior(y, SCHED, D, be, BOX)
    for _ in range(5):
        t1, t2 = BOX.lo + BOX.width * rng.random((2, 4))
        g1 = eval_observation(model, t1, D, SCHED).values
        g2 = eval_observation(model, t2, D, SCHED).values
        ref = -(np.sum((y - g1) ** 2) - np.sum((y - g2) ** 2)) / (2 * SCHED.sigma ** 2)
        got = log_posterior(t1, y, SCHED, D, be, BOX) - log_posterior(t2, y, SCHED, D, be, BOX)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-10)
        assert target(t1) == pytest.approx(log_posterior(t1, y, SCHED, D, be, BOX), rel=1e-12)


# -- sampler ------------------------------------------------------------------

def test_gaussian_recovery():
    mean = np.array([1.0, -2.0, 0.5, 3.0])
    A = np.array([[1.0, 0.0, 0.0, 0.0], [0.6, 0.8, 0.0, 0.0],
                  [-0.3, 0.2, 0.5, 0.0], [0.1, -0.4, 0.3, 2.0]])
    cov = A @ A.T
    chain = dram_run(plain_config(4, 60_000, 10_000, scale=0.1), gaussian_target(mean, cov))
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(chain.samples.mean(axis=0) - mean) < 0.05 * sd)
    emp = np.cov(chain.samples.T)
    assert np.abs(emp - cov).max() < 0.08 * np.abs(cov).max()


def test_bimodal_occupancy():
    def target(x):
        a = -0.5 * ((x[0] - 1.5) / 0.5) ** 2
        b = -0.5 * ((x[0] + 1.5) / 0.5) ** 2
        return float(np.logaddexp(a, b))

    chain = dram_run(plain_config(1, 30_000, 5_000), target)
    share = np.mean(chain.samples[:, 0] > 0)
    assert 0.3 <= share <= 0.7


def test_stationary_on_bounded_support():
    # uniform target on [0, 1]: exercises the delayed-rejection ratio next to a hard wall
    target = lambda x: 0.0 if 0.0 <= x[0] <= 1.0 else -math.inf
    cfg = DramConfig(n_iter=40_000, burn_in=2_000, x0=(0.5,), cov0=((0.5,),), seed=3,
                     adapt_start=100_000)
    chain = dram_run(cfg, target)
    x = chain.samples[::10, 0]
    assert stats.kstest(x, "uniform").pvalue > 1e-3
    assert chain.accepted[1] > 0


def test_standard_normal_without_adaptation():
    cfg = plain_config(1, 40_000, 2_000, seed=5, scale=25.0, adapt_start=100_000)
    chain = dram_run(cfg, gaussian_target([0.0], np.eye(1)))
    x = chain.samples[::20, 0]
    assert stats.kstest(x, "norm").pvalue > 1e-3
    assert chain.accepted[1] > 0


def test_determinism():
    target = gaussian_target([0.0, 0.0], np.eye(2))
    a = dram_run(plain_config(2, 3000, 500, seed=9), target)
    b = dram_run(plain_config(2, 3000, 500, seed=9), target)
    assert np.array_equal(a.samples, b.samples) and a.accepted == b.accepted
    c = dram_run(plain_config(2, 3000, 500, seed=10), target)
    assert not np.array_equal(a.samples, c.samples)


def test_zero_acceptance_raises():
    x0 = np.zeros(2)
    target = lambda x: 0.0 if np.array_equal(x, x0) else -math.inf
    with pytest.raises(DramError):
        dram_run(plain_config(2, 200, 50), target)


def test_invalid_start_raises():
    with pytest.raises(DramError):
        dram_run(plain_config(2, 200, 50), lambda x: -math.inf)
    with pytest.raises(ValueError):
        dram_run(DramConfig(n_iter=10, burn_in=0), lambda x: 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        DramConfig(n_iter=100, burn_in=100)
    with pytest.raises(ValueError):
        DramConfig(dr_scale=1.0)
    with pytest.raises(ValueError):
        DramConfig(eps=0.0)
    with pytest.raises(ValueError):
        plain_config(2, 100, 10, adapt_interval=0)
    cfg = DramConfig.for_box(BOX, n_iter=100, burn_in=10)
    assert np.allclose(cfg.x0, BOX.midpoint)
    assert np.allclose(np.diag(cfg.cov0), (BOX.width / 20) ** 2)


def test_gaussian_credible_interval_coverage():
    # flat prior and y ~ N(theta, s^2): the 95% interval must cover the truth about 95% of the time
    s = 0.3
    rng = np.random.default_rng(42)
    covered = 0
    for k in range(100):
        truth = rng.uniform(-1, 1, 2)
        y = truth + s * rng.standard_normal(2)
        cfg = DramConfig(n_iter=4000, burn_in=1000, x0=tuple(y), cov0=((s**2, 0.0), (0.0, s**2)),
                         seed=k)
        chain = dram_run(cfg, gaussian_target(y, s**2 * np.eye(2)))
        lo, hi = np.percentile(chain.samples[:, 0], [2.5, 97.5])
        covered += lo <= truth[0] <= hi
    assert covered >= 90


def test_chromatography_chain_stays_in_box(tiny_surrogate):
    model, _ = tiny_surrogate
    truth = BOX.lo + 0.6 * BOX.width
    y = eval_observation(model, truth, D, SCHED).values
    y = y + SCHED.sigma * np.random.default_rng(1).standard_normal(y.size)
    target = make_log_posterior(y, SCHED, D, SurrogateBackend(model), BOX)
    chain = dram_run(DramConfig.for_box(BOX, n_iter=3000, burn_in=1000, seed=0), target)
    assert np.all(chain.samples >= BOX.lo) and np.all(chain.samples <= BOX.hi)
    assert 0.0 < chain.acceptance_rate < 1.0
    assert chain.samples.shape == (2000, 4)


# -- diagnostics and output ---------------------------------------------------

def test_iact_iid_and_ar1():
    rng = np.random.default_rng(0)
    assert iact(rng.standard_normal(100_000)) == pytest.approx(1.0, rel=0.2)
    phi, n = 0.5, 200_000
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    assert iact(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)


def test_constant_chain_summary():
    s = chain_summary(np.full((50, 2), 3.0))
    assert s["x0"]["mean"] == 3.0 and s["x0"]["std"] == 0.0
    assert s["x0"]["ci95"] == [3.0, 3.0]
    assert math.isnan(s["x0"]["iact"])
    assert s["_std_product"] == 0.0
    with pytest.raises(ValueError):
        chain_summary(np.empty((0, 2)))


def test_chain_csv_and_summary_json(tmp_path):
    chain = dram_run(DramConfig.for_box(BOX, n_iter=300, burn_in=100, seed=0),
                     gaussian_target(BOX.midpoint, np.diag((BOX.width / 10) ** 2)))
    assert isinstance(chain, Chain)
    chain.to_csv(tmp_path / "c.csv", header_comment="config_hash=xyz")
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["# config_hash=xyz"]
    assert rows[1] == ["b1", "b2", "qs", "ntp", "logpost"]
    assert len(rows) == 2 + 200
    np.testing.assert_array_equal(np.array(rows[2:], dtype=float)[:, :4], chain.samples)
    summary_to_json(chain_summary(np.full((5, 1), 1.0)), tmp_path / "s.json")
    assert '"iact": null' in (tmp_path / "s.json").read_text()
