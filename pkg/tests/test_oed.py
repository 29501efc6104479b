import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from chrom_oed.backends import SurrogateBackend
from chrom_oed.model import DesignPoint, ObservationSchedule, ParamBox
from chrom_oed.oed import (EigConfig, UtilityMap, accelerated_eig, argmax_design, double_loop_eig,
                           eig_estimate, eig_from_loglik, sample_prior, utility_map)

BOX = ParamBox()
A, SIGMA = 1.0, 0.5
EXACT = 0.5 * np.log(1 + A**2 / SIGMA**2)


def toy_accelerated(M, seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((M, 1))
    return accelerated_eig(A * theta, rng.standard_normal((M, 1)), SIGMA)


def brute_force_eig(pred, noise, sigma):
    """Explicit double loop over (k, j) pairs with the normalisation constant kept."""
    M, K = pred.shape
    data = pred + sigma * noise
    const = -0.5 * K * np.log(2 * np.pi * sigma**2)
    terms = []
    for k in range(M):
        own = const - np.sum((data[k] - pred[k]) ** 2) / (2 * sigma**2)
        inner = [const - np.sum((data[k] - pred[j]) ** 2) / (2 * sigma**2) for j in range(M)]
        terms.append(own - (logsumexp(inner) - np.log(M)))
    return np.mean(terms)


# -- prior sampling -----------------------------------------------------------

def test_sample_prior_support_and_determinism():
    one = sample_prior(BOX, 1, seed=5)
    assert one.shape == (1, 4) and BOX.contains(one[0])
    assert np.array_equal(sample_prior(BOX, 50, 3), sample_prior(BOX, 50, 3))
    with pytest.raises(ValueError):
        sample_prior(BOX, 0, 1)


def test_sample_prior_moments():
    x = sample_prior(BOX, 10_000, seed=0)
    se = BOX.width / np.sqrt(12) / np.sqrt(10_000)
    assert np.all(np.abs(x.mean(axis=0) - BOX.midpoint) < 3 * se)


# -- estimator identities -----------------------------------------------------

def test_accelerated_matches_brute_force():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(60, 5))
    noise = rng.standard_normal((60, 5))
    est = accelerated_eig(pred, noise, 0.3, chunk=17)
    assert est.value == pytest.approx(brute_force_eig(pred, noise, 0.3), abs=1e-10)


def test_loglik_matrix_route_matches_data_route():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(40, 3))
    noise = rng.standard_normal((40, 3))
    data = pred + 0.2 * noise
    L = -((data[:, None, :] - pred[None, :, :]) ** 2).sum(axis=2) / (2 * 0.2**2)
    a = eig_from_loglik(L)
    b = accelerated_eig(pred, noise, 0.2)
    assert a.value == pytest.approx(b.value, abs=1e-10)
    assert a.stderr == pytest.approx(b.stderr, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_normalisation_constant_cancels(shift):
    rng = np.random.default_rng(2)
    L = -rng.random((30, 30)) * 20
    assert eig_from_loglik(L + shift).value == pytest.approx(eig_from_loglik(L).value, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 80), st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_accelerated_bounded_by_log_m(M, seed, sigma):
    rng = np.random.default_rng(seed)
    est = accelerated_eig(rng.normal(size=(M, 3)) * 5, rng.standard_normal((M, 3)), sigma)
    assert est.value <= np.log(M) + 1e-12


def test_no_underflow_with_tiny_noise():
    rng = np.random.default_rng(3)
    est = accelerated_eig(rng.normal(size=(200, 40)) * 10, rng.standard_normal((200, 40)), 1e-4)
    assert np.isfinite(est.value)
    assert est.value == pytest.approx(np.log(200), abs=1e-6)


def test_input_errors():
    with pytest.raises(ValueError):
        accelerated_eig(np.zeros((3, 2)), np.zeros((3, 3)), 1.0)
    bad = np.zeros((3, 2))
    bad[1, 1] = np.inf
    with pytest.raises(FloatingPointError):
        accelerated_eig(bad, np.zeros((3, 2)), 1.0)
    with pytest.raises(ValueError):
        eig_from_loglik(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        EigConfig(M=1)


# -- linear-Gaussian toy ------------------------------------------------------

def test_toy_matches_closed_form():
    est = toy_accelerated(4000, seed=0)
    assert abs(est.value - EXACT) < 3 * est.stderr


def test_toy_double_loop_with_full_inner_ensemble():
    fwd = lambda th: A * th
    sampler = lambda rng, n: rng.standard_normal((n, 1))
    est = double_loop_eig(fwd, sampler, SIGMA, M=1000, J=1000, seed=0)
    assert abs(est.value - EXACT) < 3 * est.stderr


def test_toy_variance_scales_like_one_over_m():
    reps = 400
    v500 = np.var([toy_accelerated(500, 10_000 + s).value for s in range(reps)], ddof=1)
    v1000 = np.var([toy_accelerated(1000, 20_000 + s).value for s in range(reps)], ddof=1)
    assert 0.4 <= v1000 / v500 <= 0.65


def test_nonnegative_in_expectation():
    vals = np.array([toy_accelerated(300, 500 + s).value for s in range(20)])
    assert vals.mean() >= -vals.std(ddof=1) / np.sqrt(20)


def test_double_loop_bias_is_positive():
    fwd = lambda th: A * th
    sampler = lambda rng, n: rng.standard_normal((n, 1))
    small = np.mean([double_loop_eig(fwd, sampler, SIGMA, 200, 14, 300 + s).value for s in range(30)])
    assert small - EXACT > 0


# -- chromatography backend ---------------------------------------------------

def test_uninformative_noise_gives_zero_utility(tiny_surrogate):
    model, _ = tiny_surrogate
    cfg = EigConfig(M=300, seed=0, schedule=ObservationSchedule.equidistant(8, sigma=1e6))
    est = eig_estimate(DesignPoint(1.0, 8.0), cfg, BOX, SurrogateBackend(model))
    assert abs(est.value) < 1e-3


def test_utility_map_smoke_and_determinism(tiny_surrogate):
    model, _ = tiny_surrogate
    be = SurrogateBackend(model)
    cfg = EigConfig(M=200, seed=4, schedule=ObservationSchedule.equidistant(8))
    a = utility_map([0.5, 2.5], [2.0, 12.0], cfg, BOX, be)
    b = utility_map([0.5, 2.5], [2.0, 12.0], cfg, BOX, be)
    assert a.U.shape == (2, 2) and np.all(np.isfinite(a.U))
    assert np.array_equal(a.U, b.U) and np.array_equal(a.stderr, b.stderr)
    assert a.backend == "surrogate" and len(a.backend_hash) == 64


def test_common_random_numbers_toggle(tiny_surrogate):
    model, _ = tiny_surrogate
    be = SurrogateBackend(model)
    d = DesignPoint(1.0, 8.0)
    crn = EigConfig(M=100, seed=1, schedule=ObservationSchedule.equidistant(8))
    ind = EigConfig(M=100, seed=1, schedule=crn.schedule, common_random_numbers=False)
    assert eig_estimate(d, crn, BOX, be, salt=3).value == eig_estimate(d, crn, BOX, be, salt=7).value
    assert eig_estimate(d, ind, BOX, be, salt=3).value != eig_estimate(d, ind, BOX, be, salt=7).value


def test_nonnegative_in_expectation_chromatography(tiny_surrogate):
    model, _ = tiny_surrogate
    be = SurrogateBackend(model)
    vals = []
    for s in range(20):
        cfg = EigConfig(M=100, seed=s, schedule=ObservationSchedule.equidistant(8, sigma=5.0))
        vals.append(eig_estimate(DesignPoint(0.3, 2.0), cfg, BOX, be).value)
    vals = np.array(vals)
    assert vals.mean() >= -vals.std(ddof=1) / np.sqrt(len(vals))


# -- maps and argmax ----------------------------------------------------------

def _map(U):
    U = np.asarray(U, dtype=float)
    z = np.zeros_like(U)
    return UtilityMap(np.linspace(0.05, 3, U.shape[0]), np.linspace(1, 15, U.shape[1]), U, z, z,
                      M=10, backend="test")


def test_argmax_constant_map_takes_first_node():
    d, v = argmax_design(_map(np.ones((3, 4))))
    assert (d.tau_inj, d.c_feed, v) == (0.05, 1.0, 1.0)


def test_argmax_single_perturbed_node():
    U = np.zeros((3, 4))
    U[2, 1] = 0.5
    d, v = argmax_design(_map(U))
    assert d.tau_inj == 3.0 and d.c_feed == pytest.approx(1 + 14 / 3) and v == 0.5


def test_argmax_tie_break_prefers_small_tau_then_small_c():
    U = np.zeros((3, 3))
    U[1, 2] = U[2, 0] = U[1, 1] = 1.0
    d, _ = argmax_design(_map(U))
    assert d.tau_inj == pytest.approx(1.525) and d.c_feed == 8.0


def test_map_exports(tmp_path):
    m = _map(np.arange(6.0).reshape(2, 3))
    m.to_csv(tmp_path / "u.csv", header_comment="config_hash=abc")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "tau_inj,c_feed,U,stderr_proxy"
    assert len(lines) == 2 + 6
    data = np.loadtxt(tmp_path / "u.csv", delimiter=",", skiprows=2)
    np.testing.assert_array_equal(data[:, 2], np.arange(6.0))
    m.to_json(tmp_path / "u.json")
    summary = json.loads((tmp_path / "u.json").read_text())
    assert summary["argmax"]["U"] == 5.0 and summary["M"] == 10
