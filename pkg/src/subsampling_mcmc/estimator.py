"""Estimator-style front ends: ``fit(y)`` runs a whole posterior simulation.

:class:`ExactSubsamplingMCMC` chains clustering, mode finding, calibration of
the residual statistics at the mode, tuning of the batch size, and the signed
pseudo-marginal chain.  :class:`StandardMH` is the full-data baseline.  Both
expose the recorded draws and signs and sign-corrected posterior summaries.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .control_variates import ProxyState, cluster_data
from .crn import MODES, CorrelationParams
from .diagnostics import importance_estimate, quantile_mce_ise
from .estimators import (
    BOUND_METHODS,
    DEFAULT_P_TILDE,
    FAMILIES,
    EstimatorConfig,
    calibrated_bound,
    tune_config,
    with_bound,
)
from .exceptions import InvalidConfigurationError, InvalidInputError
from .models import AR1StudentT, DataSet, UniformPrior
from .sampler import ProposalConfig, SubsampledLikelihood, find_mode, run_chain, run_mh


def _as_dataset(y) -> DataSet:
    if isinstance(y, DataSet):
        return y
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise InvalidInputError("y must be a one-dimensional series")
    return DataSet(arr)


def resolve_n_clusters(n_clusters, n_eff: int) -> int:
    """Cluster count from an int, or from a float fraction of ``n_eff`` (min 1)."""
    if isinstance(n_clusters, (bool, np.bool_)):
        raise InvalidConfigurationError("n_clusters must be a count or a fraction")
    if isinstance(n_clusters, (int, np.integer)):
        K = int(n_clusters)
    else:
        frac = float(n_clusters)
        if not 0.0 < frac <= 1.0:
            raise InvalidConfigurationError("fractional n_clusters must lie in (0, 1]")
        K = max(int(round(frac * n_eff)), 1)
    if not 1 <= K <= n_eff:
        raise InvalidConfigurationError(f"n_clusters={K} outside [1, {n_eff}]")
    return K


def initial_theta(data: DataSet, parameterization: str, prior: UniformPrior) -> np.ndarray:
    """Least-squares AR(1) fit, mapped to the parameterization and pulled inside the prior."""
    x, y = data.z[:, 0], data.z[:, 1]
    xc = x - x.mean()
    slope = float(np.dot(xc, y - y.mean()) / max(np.dot(xc, xc), 1e-300))
    intercept = float(y.mean() - slope * x.mean())
    slope = min(max(slope, 0.01), 0.99)
    if parameterization == "M1":
        theta = np.array([intercept, slope])
    else:
        theta = np.array([intercept / (1.0 - slope), slope])
    width = prior.upper - prior.lower
    return np.clip(theta, prior.lower + 0.01 * width, prior.upper - 0.01 * width)


def initial_scale(dim: int) -> float:
    """Random-walk covariance multiplier ``2.38**2 / dim`` that starts the adaptation."""
    return 2.38**2 / dim


class _PosteriorMixin:
    def expectation(self, h):
        """Sign-corrected posterior mean of ``h(theta)`` over the recorded draws."""
        check_is_fitted(self, "draws_")
        values = np.array([h(t) for t in self.draws_], dtype=float)
        return importance_estimate(values, self.signs_)

    def posterior_mean(self) -> np.ndarray:
        check_is_fitted(self, "draws_")
        w = self.signs_.astype(float)
        return (w[:, None] * self.draws_).sum(axis=0) / w.sum()

    def cdf_at(self, c, coordinate=0):
        """``(MCE, ISE)`` estimates of ``Pr(theta_j <= c)``."""
        check_is_fitted(self, "draws_")
        return quantile_mce_ise(self.draws_, self.signs_, c, coordinate)


class StandardMH(_PosteriorMixin, BaseEstimator):
    """Random-walk Metropolis on the full-data likelihood.

    Parameters
    ----------
    parameterization : {"M1", "M2"}
    nu : float
        Student-t degrees of freedom of the errors.
    n_iter : int
        Post-burn-in iterations.
    burn_in : int or None
        Defaults to 10% of ``n_iter`` with a floor of 2000.
    target_accept : float
        Acceptance rate targeted by the burn-in scale adaptation.
    random_state : int or None
    """

    def __init__(self, parameterization="M1", nu=5.0, n_iter=10_000, burn_in=None,
                 target_accept=0.35, random_state=None):
        self.parameterization = parameterization
        self.nu = nu
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.target_accept = target_accept
        self.random_state = random_state

    def fit(self, y, theta0=None):
        data = _as_dataset(y)
        model = AR1StudentT(self.parameterization, self.nu)
        prior = UniformPrior()
        rng = np.random.default_rng(self.random_state)
        start = initial_theta(data, self.parameterization, prior) if theta0 is None else theta0
        t0 = time.perf_counter()
        self.mode_, self.mode_cov_ = find_mode(model, data, prior, start)
        t_mode = time.perf_counter() - t0
        proposal = ProposalConfig(self.mode_cov_, initial_scale(self.mode_.size), self.target_accept)
        self.chain_ = run_mh(model, data, prior, self.mode_, proposal, int(self.n_iter), rng,
                             burn_in=self.burn_in)
        self.chain_.metadata.update(
            parameterization=self.parameterization, nu=float(self.nu),
            mode=self.mode_.tolist(), stage_seconds={"mode": t_mode, "chain": self.chain_.metadata["seconds"]},
        )
        self.draws_ = self.chain_.theta
        self.signs_ = self.chain_.sign
        return self


class ExactSubsamplingMCMC(_PosteriorMixin, BaseEstimator):
    """Signed pseudo-marginal MH with subsampled, bias-corrected likelihoods.

    Parameters
    ----------
    parameterization : {"M1", "M2"}
    nu : float
        Student-t degrees of freedom of the errors.
    family : {"poisson", "rg"}
        Poisson product or randomly truncated series estimator.
    mode : {"uncorrelated", "corr_g", "corr_gu"}
        Coupling of the auxiliary variables between iterations.
    sampling : {"fixed", "bernoulli"} or None
        Batch scheme; None picks Bernoulli for ``"corr_gu"`` and fixed-size
        with-replacement batches otherwise.
    expected_G : float
        Prior mean number of batches.
    target_sigma2_LL : float
        Target variance of the log-likelihood estimator at the mode.
    m_b : int or None
        Fixed batch size; skips tuning when given.
    p_tilde : float
        Probability that the soft bound holds for all batches.
    bound_method : {"empirical", "normal", "adaptive"}
        ``"empirical"`` and ``"normal"`` calibrate the bound once at the mode
        from the full residual vector; ``"adaptive"`` learns it from the
        subsamples during burn-in and freezes the burn-in average.
    n_clusters : int or float
        Cluster count, or a fraction of the number of contributions.
    phi, kappa : float
        Persistence of the batch-count latent and of the inclusion indicators.
    n_iter : int
        Post-burn-in iterations.
    burn_in : int or None
        Defaults to 10% of ``n_iter`` with a floor of 2000.
    target_accept : float
    random_state : int or None
        Master seed; split into clustering and chain streams.
    """

    def __init__(self, parameterization="M1", nu=5.0, family="poisson", mode="corr_g", sampling=None,
                 expected_G=50.0, target_sigma2_LL=400.0, m_b=None, p_tilde=DEFAULT_P_TILDE,
                 bound_method="empirical", n_clusters=0.01, phi=0.9999, kappa=0.9863,
                 n_iter=10_000, burn_in=None, target_accept=0.15, random_state=None):
        self.parameterization = parameterization
        self.nu = nu
        self.family = family
        self.mode = mode
        self.sampling = sampling
        self.expected_G = expected_G
        self.target_sigma2_LL = target_sigma2_LL
        self.m_b = m_b
        self.p_tilde = p_tilde
        self.bound_method = bound_method
        self.n_clusters = n_clusters
        self.phi = phi
        self.kappa = kappa
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.target_accept = target_accept
        self.random_state = random_state

    def _check_params(self):
        if self.family not in FAMILIES:
            raise InvalidConfigurationError(f"family must be one of {FAMILIES}")
        if self.mode not in MODES:
            raise InvalidConfigurationError(f"mode must be one of {MODES}")
        if self.bound_method not in BOUND_METHODS:
            raise InvalidConfigurationError(f"bound_method must be one of {BOUND_METHODS}")
        sampling = self.sampling or ("bernoulli" if self.mode == "corr_gu" else "fixed")
        if self.mode == "corr_gu" and sampling != "bernoulli":
            raise InvalidConfigurationError("corr_gu needs Bernoulli batches")
        return sampling

    def fit(self, y, theta0=None):
        sampling = self._check_params()
        data = _as_dataset(y)
        model = AR1StudentT(self.parameterization, self.nu)
        prior = UniformPrior()
        ss_cluster, ss_chain = np.random.SeedSequence(self.random_state).spawn(2)
        timings = {}

        t0 = time.perf_counter()
        K = resolve_n_clusters(self.n_clusters, data.n_eff)
        self.summaries_ = cluster_data(data, K, int(ss_cluster.generate_state(1)[0]))
        timings["clustering"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        start = initial_theta(data, self.parameterization, prior) if theta0 is None else theta0
        self.mode_, self.mode_cov_ = find_mode(model, data, prior, start)
        timings["mode"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        d_k = ProxyState(model, self.mode_, data, self.summaries_).residuals()
        d = float(np.sum(d_k))
        sigma2_per_unit = float(data.n_eff * np.sum((d_k - d_k.mean()) ** 2))
        self.calibration_ = {"d": d, "sigma2_b_per_unit": sigma2_per_unit, "n_eff": data.n_eff}
        timings["calibration"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        tune_method = "normal" if self.bound_method == "adaptive" else self.bound_method
        if self.m_b is None:
            self.tuning_ = tune_config(
                self.target_sigma2_LL, d, None, sigma2_per_unit, self.expected_G,
                family=self.family, n_eff=data.n_eff, p_tilde=self.p_tilde, sampling=sampling,
                bound_method=tune_method, residuals=d_k,
                seed=int(ss_chain.generate_state(1)[0]),
            )
            config = self.tuning_.config
        else:
            m_b = int(self.m_b)
            a = calibrated_bound(d, sigma2_per_unit / m_b, self.expected_G, self.p_tilde,
                                 family=self.family, method=tune_method, residuals=d_k,
                                 m_b=m_b, sampling=sampling)
            config = EstimatorConfig.from_expected_G(self.family, self.expected_G, m_b=m_b,
                                                     sampling=sampling, bound=a, p_tilde=self.p_tilde)
            self.tuning_ = None
        self.config_ = config
        timings["tuning"] = time.perf_counter() - t0

        rng = np.random.default_rng(ss_chain)
        likelihood = SubsampledLikelihood(model, data, self.summaries_, with_bound(config, config.bound))
        initial = likelihood.equilibrium_state(self.mode_, rng)
        proposal = ProposalConfig(self.mode_cov_, initial_scale(self.mode_.size), self.target_accept)
        crn = CorrelationParams(self.phi, self.kappa, self.mode)
        self.chain_ = run_chain(likelihood, prior, self.mode_, proposal, crn, int(self.n_iter), rng,
                                burn_in=self.burn_in, adapt_bound=self.bound_method == "adaptive",
                                initial_crn=initial)
        timings["chain"] = self.chain_.metadata["seconds"]
        self.chain_.metadata.update(
            parameterization=self.parameterization,
            nu=float(self.nu),
            bound_method=self.bound_method,
            calibrated_bound=float(config.bound),
            target_sigma2_LL=float(self.target_sigma2_LL),
            achieved_sigma2_LL=None if self.tuning_ is None else self.tuning_.sigma2_LL,
            tuning_clamped=None if self.tuning_ is None else self.tuning_.clamped,
            mode_theta=self.mode_.tolist(),
            calibration=self.calibration_,
            stage_seconds=timings,
        )
        self.draws_ = self.chain_.theta
        self.signs_ = self.chain_.sign
        return self
