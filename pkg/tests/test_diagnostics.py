import numpy as np
import pytest
from scipy import integrate, stats
from scipy.signal import lfilter

from subsampling_mcmc.diagnostics import (
    ChainStats,
    autocorrelation,
    cost_table,
    effective_draws_relative,
    importance_estimate,
    inefficiency_factor,
    kde_grid,
    quantile_mce_ise,
    quantile_table,
    realized_cost,
)
from subsampling_mcmc.exceptions import DegenerateDenominatorError, DegenerateSeriesError
from subsampling_mcmc.sampler import ChainResult


def test_importance_estimate_cases():
    h = np.array([0.2, 1.5, 3.0])
    assert importance_estimate(h, [1, 1, 1]) == pytest.approx(h.mean())
    assert importance_estimate(np.ones(4), [1, -1, 1, 1]) == 1.0
    assert importance_estimate([1, 2, 3], [1, 1, -1]) == 0.0
    with pytest.raises(DegenerateDenominatorError):
        importance_estimate([1, 2], [1, -1])


def test_all_positive_mce_equals_ise_exactly():
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(997, 2))
    for c in rng.normal(size=20):
        mce, ise = quantile_mce_ise(draws, np.ones(997, dtype=int), c, 1)
        assert mce == ise
    assert quantile_mce_ise(draws, np.ones(997), -100.0) == (0.0, 0.0)


def test_all_positive_estimate_is_within_range():
    rng = np.random.default_rng(1)
    h = rng.uniform(-2, 3, 500)
    est = importance_estimate(h, np.ones(500))
    assert h.min() <= est <= h.max()


def test_autocorrelation_matches_direct_sum():
    x = np.random.default_rng(2).normal(size=300)
    rho = autocorrelation(x)
    xc = x - x.mean()
    direct = np.array([np.dot(xc[: x.size - k], xc[k:]) for k in range(5)]) / np.dot(xc, xc)
    np.testing.assert_allclose(rho[:5], direct, atol=1e-12)


def test_if_white_noise():
    x = np.random.default_rng(3).normal(size=100_000)
    assert 0.9 <= inefficiency_factor(x) <= 1.1


def test_if_ar1():
    rng = np.random.default_rng(4)
    x = lfilter([1.0], [1.0, -0.5], rng.normal(size=1_000_000))
    np.testing.assert_allclose(inefficiency_factor(x), 3.0, rtol=0.05)


def test_if_alternating_is_below_one():
    assert inefficiency_factor(np.tile([1.0, -1.0], 500)) < 1.0


def test_if_constant_series():
    with pytest.raises(DegenerateSeriesError):
        inefficiency_factor(np.ones(500))


def test_realized_cost():
    m_bar, frac = realized_cost(np.full(10, 7), 3, 100, 1000)
    assert m_bar == 21.0 and frac == pytest.approx(0.121)


def test_effective_draws_relative():
    base = ChainStats(np.array([4.0, 6.0]), 1.0)
    assert np.all(effective_draws_relative(base, base) == 1.0)
    half = ChainStats(np.array([2.0, 3.0]), 0.5)
    np.testing.assert_allclose(effective_draws_relative(half, base), 4.0)


def test_kde_cases():
    grid = np.linspace(-5, 7, 2001)
    dens = kde_grid(np.full(10, 1.0), grid, bandwidth=0.5)
    np.testing.assert_allclose(dens, stats.norm(1.0, 0.5).pdf(grid), atol=1e-12)
    with pytest.raises(DegenerateSeriesError):
        kde_grid(np.full(10, 1.0), grid)


def test_kde_recovers_normal_density():
    x = np.random.default_rng(5).normal(size=100_000)
    grid = np.linspace(-3, 3, 121)
    assert np.max(np.abs(kde_grid(x, grid) - stats.norm.pdf(grid))) < 0.02


def test_kde_integrates_to_one():
    rng = np.random.default_rng(6)
    x = rng.gamma(2.0, size=500)
    bw = 0.3
    grid = np.linspace(x.min() - 5 * bw, x.max() + 5 * bw, 4000)
    np.testing.assert_allclose(integrate.trapezoid(kde_grid(x, grid, bw), grid), 1.0, atol=0.01)


def _chain(theta, sign, proposed_G, meta):
    n = theta.shape[0]
    return ChainResult(theta, np.zeros(n), np.asarray(sign), np.zeros(n, int),
                       np.asarray(proposed_G), np.ones(n, bool), meta)


def test_tables_self_comparison():
    rng = np.random.default_rng(7)
    theta = rng.normal(size=(400, 2))
    base = _chain(theta, np.ones(400, int), np.zeros(400, int), {"method": "mh", "n_eff": 100})
    rows = quantile_table({"mh": base}, base)
    assert len(rows) == 10
    for r in rows:
        assert r["mce"] == r["ise"]
        assert abs(r["mce"] - r["alpha"]) < 0.01
    cost = cost_table({"mh": base}, base)
    assert all(r["ED_rel"] == 1.0 for r in cost)


def test_cost_ignores_acceptance_pattern():
    rng = np.random.default_rng(8)
    theta = rng.normal(size=(400, 2))
    meta = {"method": "pmmh", "m_b": 2, "K": 5, "n_eff": 1000}
    pG = rng.poisson(10, 400)
    a = _chain(theta, np.ones(400, int), pG, meta)
    b = _chain(theta, np.ones(400, int), pG, meta)
    b.accepted[::2] = False
    assert cost_table({"x": a}, a)[0]["sampling_fraction"] == \
        cost_table({"x": b}, b)[0]["sampling_fraction"]
