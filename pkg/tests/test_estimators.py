import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from subsampling_mcmc.estimators import (
    EstimatorConfig,
    EstimatorWarning,
    SignedLog,
    calibrated_bound,
    dhat_bernoulli,
    dhat_fixed,
    empirical_soft_bound,
    loglik_variance_approx,
    optimal_lambda,
    poisson_estimate,
    poisson_log_estimates,
    poisson_variance,
    rg_estimate,
    rg_log_estimates,
    soft_bound,
    tune_config,
)
from subsampling_mcmc.exceptions import InfeasibleTargetError, InvalidConfigurationError


def _linear_rg(x, eps, offset):
    total, prod = 1.0, 1.0
    for g, xi in enumerate(x, start=1):
        prod *= xi
        total += (1 + eps) ** g / math.factorial(g) * prod
    return math.exp(offset) * total


def _linear_poisson(x, lam, offset):
    return math.exp(offset + lam) * float(np.prod(np.asarray(x) / lam))


def test_config_conventions():
    rg = EstimatorConfig.from_expected_G("rg", 50)
    assert rg.epsilon == pytest.approx(0.02)
    assert rg.expected_G == pytest.approx(50)
    assert rg.geometric_p == pytest.approx(0.02 / 1.02)
    pois = EstimatorConfig.from_expected_G("poisson", 50, m_b=3)
    assert pois.lam == 50 and pois.m_bar == 150
    with pytest.raises(InvalidConfigurationError):
        EstimatorConfig(family="poisson", lam=1.0, epsilon=0.1)
    with pytest.raises(InvalidConfigurationError):
        EstimatorConfig(family="rg", lam=1.0)


def test_signed_log_invariant():
    assert SignedLog(0.0, -1).value == -1.0
    with pytest.raises(ValueError):
        SignedLog(0.0, 0)
    with pytest.raises(ValueError):
        SignedLog(-np.inf, 1)


def test_dhat_fixed():
    np.testing.assert_allclose(dhat_fixed(np.full(7, 0.4), [1, 1, 5], 7), 7 * 0.4)
    assert dhat_fixed(np.array([1.0, 2.0, 3.0, 4.0]), [0, 2], 4) == 8.0
    assert dhat_fixed(lambda idx: np.asarray(idx, float) + 1, [0, 2], 4) == 8.0
    with pytest.raises(InvalidConfigurationError):
        dhat_fixed(np.ones(3), [], 3)


def test_dhat_fixed_unbiased():
    rng = np.random.default_rng(0)
    d = rng.normal(size=30)
    u = rng.integers(0, 30, size=(100_000, 4))
    est = 30 / 4 * d[u].sum(axis=1)
    assert abs(est.mean() - d.sum()) < 4 * est.std() / np.sqrt(est.size)
    np.testing.assert_allclose(dhat_fixed(d, u[0], 30), est[0])


def test_dhat_bernoulli():
    d = np.array([1.5, -2.0, 0.5])
    assert dhat_bernoulli(d, [0, 0, 0], 1.5) == 0.0
    np.testing.assert_allclose(dhat_bernoulli(d, [1, 1, 1], 3), d.sum())
    with pytest.raises(InvalidConfigurationError):
        dhat_bernoulli(d, [1, 0, 1], 0)
    rng = np.random.default_rng(1)
    d = rng.normal(size=40)
    u = rng.random((100_000, 40)) < 5 / 40
    est = 40 / 5 * (u * d).sum(axis=1)
    assert abs(est.mean() - d.sum()) < 4 * est.std() / np.sqrt(est.size)


def test_soft_bound_cases():
    G = 7
    p_half = 0.5 ** G
    np.testing.assert_allclose(soft_bound(3.0, 2.0, G, p_half, 10), 3.0, atol=1e-12)
    assert soft_bound(3.0, 0.0, G, 0.99, 10) == 3.0
    expected = stats.t(df=99).ppf(1 - 0.99 ** (1 / 50))
    np.testing.assert_allclose(soft_bound(0.0, 1.0, 50, 0.99, 100), expected, rtol=1e-10)
    with pytest.raises(InvalidConfigurationError):
        soft_bound(0.0, 1.0, 5, 0.9, 1)


def test_rg_estimate_cases():
    assert rg_estimate([], 0.5, 1.0, 2.0) == SignedLog(3.0, 1)
    assert rg_estimate([2.0, 2.0, 2.0], 0.5, 1.0, 2.0) == SignedLog(3.0, 1)
    out = rg_estimate([2.0, -1.0], 1.0, 0.0, 0.0)
    assert out.sign == 1
    assert abs(out.log_mag) < 1e-12


def test_poisson_estimate_cases():
    assert poisson_estimate([], 2.0, 0.5, 1.0) == SignedLog(3.5, 1)
    assert poisson_estimate([1.0, 3.0], 2.0, 0.0, 1.0).sign == 0
    out = poisson_estimate([4.0, -2.0, 1.0], 2.0, -2.0, 0.0)
    assert out.sign == -1
    assert abs(out.log_mag) < 1e-12


def test_signed_log_agrees_with_linear_arithmetic():
    rng = np.random.default_rng(2)
    for _ in range(200):
        G = int(rng.integers(0, 8))
        x = rng.normal(1.0, 2.0, G)
        offset = rng.normal()
        lm, s = rg_log_estimates(x, [G], 0.3, offset)
        np.testing.assert_allclose(s[0] * np.exp(lm[0]), _linear_rg(x, 0.3, offset), rtol=1e-10)
        lm, s = poisson_log_estimates(x, [G], 1.7, offset)
        np.testing.assert_allclose(s[0] * np.exp(lm[0]), _linear_poisson(x, 1.7, offset),
                                   rtol=1e-10)


factors = st.lists(st.floats(-5.0, 5.0).map(lambda v: round(v, 6)), min_size=0, max_size=8)


@settings(max_examples=200, deadline=None)
@given(x=factors, offset=st.floats(-3.0, 3.0), lam=st.floats(0.1, 10.0), eps=st.floats(0.01, 3.0))
def test_signed_log_property(x, offset, lam, eps):
    x = np.array(x)
    lm, s = poisson_log_estimates(x, [x.size], lam, offset)
    linear = _linear_poisson(x, lam, offset)
    if linear == 0.0:
        assert s[0] == 0
    else:
        np.testing.assert_allclose(s[0] * np.exp(lm[0]), linear, rtol=1e-10)
    lm, s = rg_log_estimates(x, [x.size], eps, offset)
    linear = _linear_rg(x, eps, offset)
    scale = math.exp(offset) * sum((1 + eps) ** g / math.factorial(g) * np.prod(np.abs(x[:g]))
                                   for g in range(x.size + 1))
    # Cancellation can only lose accuracy relative to the sum of term magnitudes.
    assert abs(s[0] * np.exp(lm[0]) - linear) <= 1e-10 * scale


def test_log_space_survives_huge_products():
    out = poisson_estimate(np.full(2000, 1e6), 50.0, -5e4, -10.0)
    assert np.isfinite(out.log_mag) and out.sign == 1


def _simulate(family, d, q, a, m_b, param, R, rng):
    n = d.size
    if family == "poisson":
        G = rng.poisson(param, R)
    else:
        G = rng.geometric(param / (1 + param), R) - 1
    idx = rng.integers(0, n, size=(int(G.sum()), m_b))
    x = n / m_b * d[idx].sum(axis=1) - a
    if family == "poisson":
        lm, s = poisson_log_estimates(x, G, param, q + a)
    else:
        lm, s = rg_log_estimates(x, G, param, q + a)
    return s * np.exp(lm)


@pytest.mark.parametrize("family,param", [("poisson", 3.0), ("rg", 0.5)])
def test_unbiased_on_tiny_data(family, param):
    rng = np.random.default_rng(3)
    d = rng.normal(0.0, 0.3, 15)
    q, a = -1.0, d.sum() - 2.0
    v = _simulate(family, d, q, a, 2, param, 200_000, rng)
    exact = math.exp(q + d.sum())
    assert abs(v.mean() - exact) < 4 * v.std() / np.sqrt(v.size)


def test_hard_bound_gives_positive_signs():
    rng = np.random.default_rng(4)
    d = rng.normal(0.0, 1.0, 12)
    a = 12 * d.min() - 1e-9
    for family, param in (("poisson", 4.0), ("rg", 0.25)):
        v = _simulate(family, d, 0.0, a, 3, param, 20_000, rng)
        assert np.all(v > 0)


def test_sign_rate_non_increasing_in_p_tilde():
    rng = np.random.default_rng(5)
    d_true, sigma_b, lam, R = 0.0, 1.0, 10.0, 20_000
    rates = []
    for p in (0.5, 0.9, 0.99):
        a = d_true + sigma_b * stats.norm.ppf(1 - p ** (1 / lam))
        G = rng.poisson(lam, R)
        x = rng.normal(d_true, sigma_b, int(G.sum())) - a
        _, s = poisson_log_estimates(x, G, lam, 0.0)
        rates.append(np.mean(s < 0))
    for lo, hi in zip(rates[1:], rates[:-1]):
        se = np.sqrt((lo * (1 - lo) + hi * (1 - hi)) / R)
        assert lo <= hi + 3 * se


def test_poisson_variance_closed_form():
    lam = 3.0
    assert poisson_variance(-5.0, 5.0 - lam + 1.0, 6.0, 0.0, lam) == 0.0
    np.testing.assert_allclose(poisson_variance(-2.0, 2.0, 2.0, 0.0, lam), math.expm1(lam),
                               rtol=1e-14)
    q, a, d, s2 = 0.3, 1.0, 2.5, 0.8
    textbook = math.exp(2 * (q + a)) * (math.exp(lam + (s2 + (d - a) ** 2) / lam)
                                        - math.exp(2 * (d - a)))
    np.testing.assert_allclose(poisson_variance(q, a, d, s2, lam), textbook, rtol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(EstimatorWarning):
            poisson_variance(400.0, 0.0, 1.0, 1.0, 1.0)


def test_poisson_variance_matches_monte_carlo():
    rng = np.random.default_rng(6)
    q, a, d, s2, lam = 0.0, 0.0, 1.5, 0.5, 2.0
    G = rng.poisson(lam, 400_000)
    x = rng.normal(d, np.sqrt(s2), int(G.sum())) - a
    lm, s = poisson_log_estimates(x, G, lam, q + a)
    v = s * np.exp(lm)
    np.testing.assert_allclose(v.var(), poisson_variance(q, a, d, s2, lam), rtol=0.05)


def test_loglik_variance_approx_identity():
    lam, s2 = 20.0, 9.0
    np.testing.assert_allclose(loglik_variance_approx(30.0, 10.0, s2, lam),
                               s2 / lam + s2**2 / (4 * lam**3), rtol=1e-12)
    assert loglik_variance_approx(5.0, 2.0, 0.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        loglik_variance_approx(1.0, 1.0, 1.0, 1.0)


def test_optimal_lambda():
    assert optimal_lambda(5.0, 2.0, 0.0) == 3.0
    assert optimal_lambda(2.0, 2.0, 4.0) == 2.0
    with pytest.warns(EstimatorWarning):
        assert optimal_lambda(1.0, 1.0, 0.0) == 0.0
    rng = np.random.default_rng(7)
    for _ in range(5):
        d, a, s2 = rng.uniform(1, 4), rng.uniform(-2, 0), rng.uniform(0.1, 3)
        lam_star = optimal_lambda(d, a, s2)
        grid = np.linspace(0.1, 10 * lam_star, 200)
        best = grid[np.argmin([poisson_variance(0.0, a, d, s2, g) for g in grid])]
        assert abs(best - lam_star) <= grid[1] - grid[0]


def test_empirical_bound_controls_batch_tail():
    rng = np.random.default_rng(8)
    r = rng.standard_t(3, 500)
    a = empirical_soft_bound(r, 1, 20, 0.99, seed=0)
    dhat = 500 * r
    np.testing.assert_array_less(np.mean(dhat <= a), 1 - 0.99 ** (1 / 20) + 1e-12)
    a5 = empirical_soft_bound(r, 5, 20, 0.99, seed=0)
    assert a5 == empirical_soft_bound(r, 5, 20, 0.99, seed=0)


def test_calibrated_bound_normal_matches_population_quantile():
    d, s2, lam = 100.0, 25.0, 10.0
    a = calibrated_bound(d, s2, lam, 0.99, family="poisson", method="normal")
    G = max(int(np.ceil(d - a)), lam)
    np.testing.assert_allclose(a, d + 5.0 * stats.norm.ppf(1 - 0.99 ** (1 / G)), rtol=1e-6)


def test_tune_poisson_hits_target():
    res = tune_config(2.0, 0.0, -10.0, 4000.0, 10.0, family="poisson", n_eff=5000)
    assert res.within_tolerance and not res.clamped
    cfg = res.config
    recomputed = loglik_variance_approx(0.0, cfg.bound, 4000.0 / cfg.m_b, 10.0)
    assert abs(recomputed - 2.0) <= 0.2


def test_tune_clamps_when_target_huge():
    with pytest.warns(EstimatorWarning):
        res = tune_config(1e6, 0.0, -30.0, 1e-6, 10.0, family="poisson", n_eff=100)
    assert res.clamped and res.config.m_b == 1


def test_tune_rg_uses_epsilon_from_expected_G():
    res = tune_config(2.0, 0.0, -1.0, 200.0, 50.0, family="rg", n_eff=2000, n_rep=2000)
    assert res.config.epsilon == pytest.approx(1 / 50)
    assert res.within_tolerance


def test_tune_reports_infeasible_target():
    with pytest.raises(InfeasibleTargetError) as info:
        tune_config(2.0, 0.0, -30.0, 4000.0, 10.0, family="poisson", n_eff=5000)
    assert "min_sigma2_LL" in info.value.stats
