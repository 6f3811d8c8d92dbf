import numpy as np
import pytest
from sklearn.base import clone

from subsampling_mcmc.estimator import ExactSubsamplingMCMC, StandardMH, resolve_n_clusters
from subsampling_mcmc.exceptions import InvalidConfigurationError


def test_params_round_trip():
    est = ExactSubsamplingMCMC(family="rg", n_iter=5, m_b=3)
    params = est.get_params()
    assert params["family"] == "rg" and params["m_b"] == 3
    assert clone(est).get_params() == params
    est.set_params(phi=0.5)
    assert est.phi == 0.5


def test_resolve_n_clusters():
    assert resolve_n_clusters(0.01, 9999) == 100
    assert resolve_n_clusters(0.00001, 100) == 1
    assert resolve_n_clusters(7, 100) == 7
    with pytest.raises(InvalidConfigurationError):
        resolve_n_clusters(200, 100)
    with pytest.raises(InvalidConfigurationError):
        resolve_n_clusters(1.5, 100)


def test_invalid_params_fail_at_fit(small_data):
    with pytest.raises(InvalidConfigurationError):
        ExactSubsamplingMCMC(mode="corr_gu", sampling="fixed").fit(small_data.y)
    with pytest.raises(InvalidConfigurationError):
        ExactSubsamplingMCMC(family="normal").fit(small_data.y)


def test_fit_sets_attributes(small_data):
    est = ExactSubsamplingMCMC(n_clusters=20, n_iter=50, burn_in=20, random_state=0,
                               expected_G=5, target_sigma2_LL=2.1, mode="uncorrelated")
    est.fit(small_data.y)
    assert est.draws_.shape == (50, 2) and est.signs_.shape == (50,)
    assert est.summaries_.K == 20
    assert est.config_.lam == 5
    mce, ise = est.cdf_at(est.mode_[1], 1)
    assert 0 <= mce <= 1
    np.testing.assert_allclose(est.expectation(lambda t: t[0]), est.posterior_mean()[0])


def test_fixed_batch_size_skips_tuning(small_data):
    est = ExactSubsamplingMCMC(n_clusters=4, m_b=7, n_iter=20, burn_in=10, random_state=1)
    est.fit(small_data.y)
    assert est.tuning_ is None and est.config_.m_b == 7


def test_standard_mh_fit(small_data):
    est = StandardMH(n_iter=100, burn_in=50, random_state=0).fit(small_data.y)
    assert est.draws_.shape == (100, 2)
    assert np.all(est.signs_ == 1)
    assert est.chain_.metadata["parameterization"] == "M1"


def test_same_seed_same_draws(small_data):
    kw = dict(n_clusters=4, n_iter=40, burn_in=10, random_state=3)
    a = ExactSubsamplingMCMC(**kw).fit(small_data.y)
    b = ExactSubsamplingMCMC(**kw).fit(small_data.y)
    np.testing.assert_array_equal(a.draws_, b.draws_)
