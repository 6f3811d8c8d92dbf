"""Random-walk Metropolis on the exact likelihood and signed pseudo-marginal MH.

The pseudo-marginal chain runs on ``|L_hat|`` and records the sign of the
current estimate at every iteration so that posterior expectations can be
corrected afterwards (see :mod:`subsampling_mcmc.diagnostics`).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .control_variates import ClusterSummaries, ProxyState
from .crn import BlockSampler, CorrelationParams, CrnState, GDistribution, fresh_state, propose_state
from .estimators import (
    ZERO,
    EstimatorConfig,
    SignedLog,
    poisson_log_estimates,
    rg_log_estimates,
    soft_bound,
    subsample_bound_stats,
)
from .exceptions import InvalidConfigurationError
from .models import AR1Model, DataSet, UniformPrior

ADAPT_BATCH = 50
MIN_BURN_IN = 2000


@dataclass
class ProposalConfig:
    """Gaussian random walk ``N(theta_c, scale * covariance)``."""

    covariance: np.ndarray
    scale: float = 1.0
    target_accept: float = 0.35

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float)
        if not np.allclose(self.covariance, self.covariance.T):
            raise InvalidConfigurationError("proposal covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise InvalidConfigurationError("proposal covariance must be positive definite") from exc
        if not self.scale > 0:
            raise InvalidConfigurationError("proposal scale must be positive")

    def draw(self, theta, rng):
        return theta + math.sqrt(self.scale) * (self._chol @ rng.standard_normal(theta.size))


# ---------------------------------------------------------------- exact MH


def metropolis_step(x, log_target_x, propose, log_target, rng):
    """One Metropolis step with a symmetric proposal.

    Returns ``(x', log_target(x'), accepted)``.
    """
    x_p = propose(x, rng)
    lt_p = log_target(x_p)
    log_u = math.log(rng.random())
    if lt_p == -np.inf:
        return x, log_target_x, False
    if log_u < lt_p - log_target_x:
        return x_p, lt_p, True
    return x, log_target_x, False


@dataclass
class MHState:
    theta: np.ndarray
    loglik: float


def mh_step(state: MHState, model: AR1Model, data: DataSet, proposal, prior, rng):
    """Standard MH on the full-data likelihood; costs ``n_eff`` contributions per
    proposal that lands inside the prior support."""
    theta_p = proposal.draw(state.theta, rng)
    log_u = math.log(rng.random())
    lp_p = prior.logpdf(theta_p)
    if lp_p == -np.inf:
        return state, False
    ll_p = model.full_loglik(theta_p, data)
    if log_u < ll_p + lp_p - state.loglik - prior.logpdf(state.theta):
        return MHState(theta_p, ll_p), True
    return state, False


# ---------------------------------------------------------------- estimator bundle


class Evaluation(NamedTuple):
    signed: SignedLog
    bound: float
    residuals: np.ndarray


class SubsampledLikelihood:
    """Evaluates the signed likelihood estimator at ``(theta, u, G)``.

    Parameters
    ----------
    model, data, summaries
        Model, observations and control-variate clusters.
    config : EstimatorConfig
    bound : float or callable, optional
        Overrides ``config.bound``.  A callable receives ``(theta, proxy)``
        where ``proxy`` is the :class:`ProxyState` at ``theta``.

    Counters: ``n_evaluations``, ``n_data_evals`` (subsampled contributions)
    and ``n_deriv_evals`` (``K`` per evaluation).
    """

    def __init__(self, model, data, summaries: ClusterSummaries, config: EstimatorConfig, bound=None):
        self.model = model
        self.data = data
        self.summaries = summaries
        self.config = config
        self.bound = config.bound if bound is None else bound
        self.gdist = GDistribution.for_config(config)
        self.block_sampler = BlockSampler(config.sampling, config.m_b, data.n_eff)
        self.n_evaluations = 0
        self.n_data_evals = 0
        self.n_deriv_evals = 0

    def fresh_state(self, rng, v=None) -> CrnState:
        return fresh_state(self.gdist, self.block_sampler, rng, v=v)

    def equilibrium_state(self, theta, rng, bound=None, n_candidates=32) -> CrnState:
        """Auxiliary state drawn near its conditional law under the signed target.

        Given ``theta`` and a positive estimate, the Poisson batch count is
        ``Poisson(d - a)`` and each block is drawn from ``p(u) (dhat(u) - a)``.
        Fixed-size blocks are sampled exactly from that mixture (negative
        per-draw weights are clipped); Bernoulli blocks by importance
        resampling over ``n_candidates``.  One full pass over the data.  Only
        the starting point changes, never the target.
        """
        if self.config.family != "poisson":
            return self.fresh_state(rng)
        theta = np.asarray(theta, dtype=float)
        proxy = ProxyState(self.model, theta, self.data, self.summaries)
        d_k = proxy.residuals()
        a = self.resolve_bound(theta, proxy, d_k, 0, False) if bound is None else float(bound)
        n, m_b = self.data.n_eff, self.config.m_b
        mean_excess = float(np.sum(d_k)) - a
        if not mean_excess > 0:
            return self.fresh_state(rng)
        G = min(int(rng.poisson(mean_excess)), self.gdist.support_max)
        sampler = self.block_sampler
        if self.config.sampling == "fixed":
            w = np.clip(n / m_b * d_k - a / m_b, 0.0, None)
            cdf = np.cumsum(w)
            blocks = []
            for _ in range(G):
                b = sampler.fresh(rng)
                b[rng.integers(m_b)] = np.searchsorted(cdf, rng.random() * cdf[-1], side="right")
                blocks.append(b)
        else:
            blocks = []
            for _ in range(G):
                cands = sampler.fresh_blocks(n_candidates, rng)
                w = np.array([max(n / m_b * d_k[c].sum() - a, 0.0) for c in cands])
                pick = rng.choice(n_candidates, p=w / w.sum()) if w.sum() > 0 else 0
                blocks.append(cands[pick])
        return CrnState(self.gdist.latent_for(G), G, tuple(blocks))

    def batch_estimates(self, theta, crn: CrnState):
        """``(proxy, dhat per block, pooled residuals)``."""
        proxy = ProxyState(self.model, theta, self.data, self.summaries)
        self.n_evaluations += 1
        self.n_deriv_evals += self.summaries.K
        if crn.G == 0:
            return proxy, np.empty(0), np.empty(0)
        lengths = np.fromiter((b.size for b in crn.blocks), dtype=np.int64, count=crn.G)
        idx = np.concatenate(crn.blocks)
        r = proxy.residuals(idx)
        self.n_data_evals += idx.size
        seg = np.repeat(np.arange(crn.G), lengths)
        dhat = self.data.n_eff / self.config.m_b * np.bincount(seg, weights=r, minlength=crn.G)
        return proxy, dhat, r

    def resolve_bound(self, theta, proxy, residuals, G, adaptive):
        if adaptive and G >= 1:
            st = subsample_bound_stats(residuals, self.data.n_eff, self.config.m_b)
            if st is not None:
                return soft_bound(st[0], st[1], G, self.config.p_tilde, st[2])
        if callable(self.bound):
            return float(self.bound(theta, proxy))
        return float(self.bound)

    def evaluate(self, theta, crn: CrnState, adaptive=False, bound=None) -> Evaluation:
        proxy, dhat, r = self.batch_estimates(theta, crn)
        a = bound if bound is not None else self.resolve_bound(theta, proxy, r, crn.G, adaptive)
        x = dhat - a
        G = np.array([crn.G])
        if self.config.family == "poisson":
            lm, s = poisson_log_estimates(x, G, self.config.lam, proxy.q + a)
        else:
            lm, s = rg_log_estimates(x, G, self.config.epsilon, proxy.q + a)
        signed = SignedLog(float(lm[0]), int(s[0])) if s[0] != 0 else ZERO
        return Evaluation(signed, a, r)


# ---------------------------------------------------------------- signed PMMH


@dataclass
class PMState:
    theta: np.ndarray
    signed: SignedLog
    crn: CrnState
    bound: float
    log_prior: float


class StepInfo(NamedTuple):
    accepted: bool
    proposed_G: int
    alpha: float


def signed_pmmh_step(state: PMState, likelihood: SubsampledLikelihood, proposal, prior,
                     crn_params: CorrelationParams, rng, adaptive_bound=False, log_q_ratio=None):
    """One signed pseudo-marginal MH step.

    Acceptance uses magnitudes only.  A proposal with an exactly zero
    estimate is rejected; a current state with a zero estimate is left for
    any proposal with a non-zero one.  ``log_q_ratio(theta_c, theta_p)``
    supplies ``log q(theta_c|theta_p) - log q(theta_p|theta_c)`` for
    asymmetric proposals.
    """
    theta_p = proposal.draw(state.theta, rng)
    crn_p = propose_state(state.crn, crn_params, likelihood.gdist, likelihood.block_sampler, rng)
    log_u = math.log(rng.random())
    lp_p = prior.logpdf(theta_p)
    if lp_p == -np.inf:
        return state, StepInfo(False, crn_p.G, 0.0)
    ev = likelihood.evaluate(theta_p, crn_p, adaptive=adaptive_bound)
    if ev.signed.sign == 0:
        return state, StepInfo(False, crn_p.G, 0.0)
    if state.signed.sign == 0:
        log_alpha = 0.0
    else:
        log_alpha = ev.signed.log_mag - state.signed.log_mag + lp_p - state.log_prior
        if log_q_ratio is not None:
            log_alpha += log_q_ratio(state.theta, theta_p)
    alpha = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    if log_u < log_alpha:
        return PMState(theta_p, ev.signed, crn_p, ev.bound, lp_p), StepInfo(True, crn_p.G, alpha)
    return state, StepInfo(False, crn_p.G, alpha)


# ---------------------------------------------------------------- adaptation


def adapt_scale(accepts, scale, target, t) -> float:
    """Robbins-Monro step on ``log scale`` from one batch of accept indicators.

    ``log l <- log l + t**-0.6 * (mean(accepts) - target)`` for batch number ``t >= 1``.
    """
    rate = float(np.mean(accepts))
    return float(scale * math.exp(t ** -0.6 * (rate - target)))


def adapt_soft_bound(bounds) -> float:
    """Mean of the burn-in soft bounds (exactly rounded, so order-invariant)."""
    bounds = list(bounds)
    if not bounds:
        raise InvalidConfigurationError("no burn-in bounds to average")
    return math.fsum(bounds) / len(bounds)


def default_burn_in(n_iter: int) -> int:
    return max(int(0.1 * n_iter), MIN_BURN_IN)


# ---------------------------------------------------------------- chains


@dataclass
class ChainResult:
    """Post-burn-in iterates plus run metadata.

    ``sign`` and ``log_mag`` describe the estimate attached to each recorded
    iterate; ``proposed_G`` the batch count proposed at that iteration.
    """

    theta: np.ndarray
    log_mag: np.ndarray
    sign: np.ndarray
    G: np.ndarray
    proposed_G: np.ndarray
    accepted: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return self.theta.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.n_iter else float("nan")

    @property
    def negative_fraction(self) -> float:
        return float(np.mean(self.sign < 0)) if self.n_iter else float("nan")


def _empty_arrays(n, dim):
    return (
        np.empty((n, dim)),
        np.empty(n),
        np.empty(n, dtype=np.int64),
        np.empty(n, dtype=np.int64),
        np.empty(n, dtype=np.int64),
        np.empty(n, dtype=bool),
    )


def run_mh(model, data, prior, theta0, proposal: ProposalConfig, n_iter, rng, burn_in=None,
           adapt=True):
    """Adaptive-scale exact MH; returns the post-burn-in chain."""
    burn_in = default_burn_in(n_iter) if burn_in is None else int(burn_in)
    t0 = time.perf_counter()
    model_evals0 = model.n_contrib_evals
    state = MHState(np.asarray(theta0, dtype=float), model.full_loglik(theta0, data))
    scale = proposal.scale
    trace = []
    acc_batch = []
    batch_no = 0
    for _ in range(burn_in):
        state, acc = mh_step(state, model, data, proposal, prior, rng)
        acc_batch.append(acc)
        if adapt and len(acc_batch) == ADAPT_BATCH:
            batch_no += 1
            scale = adapt_scale(acc_batch, scale, proposal.target_accept, batch_no)
            proposal = ProposalConfig(proposal.covariance, scale, proposal.target_accept)
            trace.append(scale)
            acc_batch = []
    theta, ll, sign, G, pG, accepted = _empty_arrays(n_iter, state.theta.size)
    for i in range(n_iter):
        state, acc = mh_step(state, model, data, proposal, prior, rng)
        theta[i] = state.theta
        ll[i] = state.loglik
        accepted[i] = acc
    sign[:] = 1
    G[:] = 0
    pG[:] = 0
    meta = {
        "method": "mh",
        "n_eff": data.n_eff,
        "burn_in": burn_in,
        "n_iter": n_iter,
        "final_scale": scale,
        "scale_trace": trace,
        "contrib_evals": model.n_contrib_evals - model_evals0,
        "seconds": time.perf_counter() - t0,
    }
    return ChainResult(theta, ll, sign, G, pG, accepted, meta)


def run_chain(likelihood: SubsampledLikelihood, prior, theta0, proposal: ProposalConfig,
              crn_params: CorrelationParams, n_iter, rng, burn_in=None, adapt_scale_=True,
              adapt_bound=True, initial_crn=None):
    """Signed pseudo-marginal chain: burn-in with adaptation, then ``n_iter`` draws.

    During burn-in the proposal scale is adapted towards
    ``proposal.target_accept`` and, if ``adapt_bound``, each estimate uses
    the soft bound computed from its own subsample.  At the end of burn-in the
    bound is frozen to the average over burn-in iterates and the current
    estimate is recomputed with it.
    """
    burn_in = default_burn_in(n_iter) if burn_in is None else int(burn_in)
    t0 = time.perf_counter()
    theta0 = np.asarray(theta0, dtype=float)
    crn0 = likelihood.fresh_state(rng) if initial_crn is None else initial_crn
    ev = likelihood.evaluate(theta0, crn0, adaptive=adapt_bound and burn_in > 0)
    state = PMState(theta0, ev.signed, crn0, ev.bound, prior.logpdf(theta0))
    scale = proposal.scale
    scale_trace, bounds, acc_batch = [], [], []
    batch_no = 0
    burn_accepts = 0
    for _ in range(burn_in):
        state, info = signed_pmmh_step(state, likelihood, proposal, prior, crn_params, rng,
                                       adaptive_bound=adapt_bound)
        burn_accepts += info.accepted
        bounds.append(state.bound)
        acc_batch.append(info.accepted)
        if adapt_scale_ and len(acc_batch) == ADAPT_BATCH:
            batch_no += 1
            scale = adapt_scale(acc_batch, scale, proposal.target_accept, batch_no)
            proposal = ProposalConfig(proposal.covariance, scale, proposal.target_accept)
            scale_trace.append(scale)
            acc_batch = []
    final_bound = None
    if adapt_bound and burn_in > 0:
        final_bound = adapt_soft_bound(bounds)
        likelihood.bound = final_bound
        ev = likelihood.evaluate(state.theta, state.crn, bound=final_bound)
        state = PMState(state.theta, ev.signed, state.crn, final_bound, state.log_prior)
    counters0 = (likelihood.n_evaluations, likelihood.n_data_evals, likelihood.n_deriv_evals)
    theta, lm, sign, G, pG, accepted = _empty_arrays(n_iter, theta0.size)
    for i in range(n_iter):
        state, info = signed_pmmh_step(state, likelihood, proposal, prior, crn_params, rng)
        theta[i] = state.theta
        lm[i] = state.signed.log_mag
        sign[i] = state.signed.sign
        G[i] = state.crn.G
        pG[i] = info.proposed_G
        accepted[i] = info.accepted
    cfg = likelihood.config
    meta = {
        "method": "pmmh",
        "family": cfg.family,
        "sampling": cfg.sampling,
        "mode": crn_params.mode,
        "phi": crn_params.phi,
        "kappa": crn_params.kappa,
        "m_b": cfg.m_b,
        "expected_G": cfg.expected_G,
        "p_tilde": cfg.p_tilde,
        "K": likelihood.summaries.K,
        "n_eff": likelihood.data.n_eff,
        "burn_in": burn_in,
        "n_iter": n_iter,
        "burn_in_accept_rate": burn_accepts / burn_in if burn_in else None,
        "final_scale": scale,
        "scale_trace": scale_trace,
        "final_bound": final_bound if final_bound is not None else (
            likelihood.bound if not callable(likelihood.bound) else None
        ),
        "sampling_evaluations": likelihood.n_evaluations - counters0[0],
        "sampling_data_evals": likelihood.n_data_evals - counters0[1],
        "sampling_deriv_evals": likelihood.n_deriv_evals - counters0[2],
        "seconds": time.perf_counter() - t0,
    }
    return ChainResult(theta, lm, sign, G, pG, accepted, meta)


# ---------------------------------------------------------------- mode finding


def find_mode(model: AR1Model, data: DataSet, prior: UniformPrior, theta0, step=1e-4):
    """Posterior mode under the uniform prior and ``-inverse Hessian`` there.

    One optimization on the full data; the Hessian is a central finite
    difference of the log-likelihood.
    """
    theta0 = np.asarray(theta0, dtype=float)
    width = prior.upper - prior.lower
    bounds = list(zip(prior.lower + 1e-6 * width, prior.upper - 1e-6 * width))

    def neg(t):
        return -model.full_loglik(t, data)

    res = optimize.minimize(neg, theta0, method="L-BFGS-B", bounds=bounds)
    mode = res.x
    k = mode.size
    H = np.empty((k, k))
    h = step * np.maximum(1.0, np.abs(mode))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            fpp = model.full_loglik(mode + ei + ej, data)
            fpm = model.full_loglik(mode + ei - ej, data)
            fmp = model.full_loglik(mode - ei + ej, data)
            fmm = model.full_loglik(mode - ei - ej, data)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    cov = np.linalg.inv(-H)
    cov = 0.5 * (cov + cov.T)
    return mode, cov
