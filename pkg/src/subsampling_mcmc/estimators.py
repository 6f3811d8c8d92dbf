"""Unbiased, possibly negative, likelihood estimators built from data subsamples.

Both estimators combine ``G`` independent batch estimates ``dhat_h`` of the
residual sum ``d`` with a lower bound ``a``:

* the randomly truncated series (``"rg"``), with ``G`` geometric on
  ``{0, 1, ...}`` and ``Pr(G >= g) = (1 + eps)**-g``::

      exp(q + a) * (1 + sum_{g=1}^{G} (1 + eps)**g / g! * prod_{h<=g} (dhat_h - a))

* the Poisson product (``"poisson"``), with ``G ~ Poisson(lam)``::

      exp(q + a + lam) * prod_{h=1}^{G} (dhat_h - a) / lam

Values are carried as ``(log|L|, sign)`` pairs and never formed in linear
scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .exceptions import InfeasibleTargetError, InvalidConfigurationError

FAMILIES = ("poisson", "rg")
SAMPLING_SCHEMES = ("fixed", "bernoulli")
DEFAULT_P_TILDE = 0.99


class EstimatorWarning(UserWarning):
    """Flags a clamped, overflowing or degenerate result."""


@dataclass(frozen=True)
class SignedLog:
    """``sign * exp(log_mag)``; ``sign == 0`` exactly when ``log_mag == -inf``."""

    log_mag: float
    sign: int

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or 1, got {self.sign}")
        if (self.sign == 0) != (self.log_mag == -np.inf):
            raise ValueError("sign 0 and log_mag -inf must occur together")

    @property
    def value(self) -> float:
        return self.sign * float(np.exp(self.log_mag)) if self.sign else 0.0


ZERO = SignedLog(-np.inf, 0)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator family, batch layout and bound.

    ``epsilon`` is used by the ``"rg"`` family and ``lam`` by ``"poisson"``;
    ``bound`` is the lower bound ``a`` in log-likelihood units.
    """

    family: str = "poisson"
    m_b: int = 10
    sampling: str = "fixed"
    epsilon: float | None = None
    lam: float | None = None
    bound: float = 0.0
    p_tilde: float = DEFAULT_P_TILDE

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfigurationError(f"unknown estimator family {self.family!r}")
        if self.sampling not in SAMPLING_SCHEMES:
            raise InvalidConfigurationError(f"unknown sampling scheme {self.sampling!r}")
        if int(self.m_b) < 1:
            raise InvalidConfigurationError("m_b must be at least 1")
        if not 0.0 < self.p_tilde < 1.0:
            raise InvalidConfigurationError("p_tilde must lie in (0, 1)")
        if self.family == "rg":
            if self.epsilon is None or not self.epsilon > 0:
                raise InvalidConfigurationError("rg estimator needs epsilon > 0")
            if self.lam is not None:
                raise InvalidConfigurationError("lam is not used by the rg estimator")
        else:
            if self.lam is None or not self.lam > 0:
                raise InvalidConfigurationError("poisson estimator needs lam > 0")
            if self.epsilon is not None:
                raise InvalidConfigurationError("epsilon is not used by the poisson estimator")
        if not np.isfinite(self.bound):
            raise InvalidConfigurationError("bound must be finite")

    @classmethod
    def from_expected_G(cls, family, expected_G, **kwargs):
        if family == "rg":
            return cls(family=family, epsilon=1.0 / expected_G, **kwargs)
        return cls(family=family, lam=float(expected_G), **kwargs)

    @property
    def geometric_p(self) -> float:
        return self.epsilon / (1.0 + self.epsilon)

    @property
    def expected_G(self) -> float:
        return 1.0 / self.epsilon if self.family == "rg" else self.lam

    @property
    def m_bar(self) -> float:
        return self.m_b * self.expected_G


# ---------------------------------------------------------------- batches


def _residuals_at(residual_fn, idx):
    if callable(residual_fn):
        return np.asarray(residual_fn(idx), dtype=float)
    return np.asarray(residual_fn, dtype=float)[idx]


def dhat_fixed(residual_fn, u, n_eff: int) -> float:
    """``(n/m_b) * sum_i d_{u_i}`` for with-replacement indices ``u``.

    ``residual_fn`` is either the residual vector or a callable mapping an
    index array to residuals.
    """
    u = np.asarray(u, dtype=np.int64)
    if u.size == 0:
        raise InvalidConfigurationError("empty subsample")
    return n_eff / u.size * float(np.sum(_residuals_at(residual_fn, u)))


def dhat_bernoulli(residual_fn, u, m_b: float) -> float:
    """``(n/m_b) * sum_k u_k d_k`` for a binary inclusion vector ``u``."""
    if m_b <= 0:
        raise InvalidConfigurationError("m_b must be positive")
    u = np.asarray(u, dtype=bool)
    idx = np.flatnonzero(u)
    if idx.size == 0:
        return 0.0
    return u.size / m_b * float(np.sum(_residuals_at(residual_fn, idx)))


# ---------------------------------------------------------------- bounds


def soft_bound(d_hat, sigma_b_hat, G, p_tilde, m) -> float:
    """Lower bound that all ``G`` batch estimates exceed with probability ``p_tilde``.

    Uses a Student-t quantile with ``m - 1`` degrees of freedom since ``d``
    and ``sigma_b`` are estimated from ``m`` subsampled residuals.
    """
    if m < 2:
        raise InvalidConfigurationError("soft bound needs at least 2 subsampled residuals")
    if G < 1:
        raise InvalidConfigurationError("soft bound needs G >= 1")
    if not 0.0 < p_tilde < 1.0:
        raise InvalidConfigurationError("p_tilde must lie in (0, 1)")
    if sigma_b_hat == 0:
        return float(d_hat)
    # 1 - p**(1/G) without cancellation for p close to 1
    tail = -np.expm1(np.log(p_tilde) / G)
    return float(d_hat + sigma_b_hat * stats.t.ppf(tail, m - 1))


def population_soft_bound(d, sigma_b, G, p_tilde) -> float:
    """Soft bound with known ``d`` and ``sigma_b`` (normal quantile)."""
    tail = -np.expm1(np.log(p_tilde) / max(G, 1))
    return float(d + sigma_b * stats.norm.ppf(tail))


BOUND_METHODS = ("empirical", "normal", "adaptive")
_SIM_BUDGET = 30_000_000  # residual draws per empirical bound


def _bound_tail(G, p_tilde):
    if not 0.0 < p_tilde < 1.0:
        raise InvalidConfigurationError("p_tilde must lie in (0, 1)")
    return -np.expm1(np.log(p_tilde) / max(int(G), 1))


def empirical_soft_bound(residuals, m_b, G, p_tilde, *, sampling="fixed", seed=0, n_sim=None):
    """Soft bound from the actual distribution of batch estimates.

    Finds ``a`` with ``Pr(dhat <= a) <= 1 - p_tilde**(1/G)`` when batches are
    drawn from the full residual vector.  With-replacement batches of size one
    are enumerated exactly; otherwise ``n_sim`` batch estimates are simulated.
    Returns None when the simulation would exceed its budget (the normal
    approximation is then adequate).
    """
    d_k = np.asarray(residuals, dtype=float).ravel()
    n = d_k.size
    tail = _bound_tail(G, p_tilde)
    if sampling == "fixed" and m_b == 1:
        x = np.sort(n * d_k)
    else:
        if n_sim is None:
            n_sim = int(np.clip(np.ceil(100.0 / tail), 10_000, 400_000))
        if n_sim * max(m_b, 1) > _SIM_BUDGET:
            return None
        rng = np.random.default_rng(seed)
        x = np.empty(n_sim)
        chunk = max(1, _SIM_BUDGET // (10 * max(int(m_b), 1)))
        for start in range(0, n_sim, chunk):
            size = min(chunk, n_sim - start)
            if sampling == "fixed":
                idx = rng.integers(0, n, size=(size, int(m_b)))
                x[start : start + size] = n / m_b * d_k[idx].sum(axis=1)
            else:
                # Included counts are binomial; members are drawn with
                # replacement, which is immaterial for m_b << n.
                counts = rng.binomial(n, m_b / n, size=size)
                idx = rng.integers(0, n, size=int(counts.sum()))
                seg = np.repeat(np.arange(size), counts)
                x[start : start + size] = n / m_b * np.bincount(seg, weights=d_k[idx], minlength=size)
        x.sort()
    j = int(np.floor(tail * x.size))
    return float(np.nextafter(x[j], -np.inf))


def bound_batch_count(family, expected_G, d, a) -> int:
    """Batch count at which a bound is calibrated.

    Under the signed target the Poisson batch count is tilted to
    ``Poisson(d - a)``, so a Poisson bound must hold for about ``d - a``
    batches rather than ``lam``.  The series estimator keeps ``E[G]``.
    """
    if family == "poisson" and a is not None and d - a > expected_G:
        return int(np.ceil(d - a))
    return max(int(round(expected_G)), 1)


def calibrated_bound(d, sigma2_b, expected_G, p_tilde, *, family="poisson", method="normal",
                     residuals=None, m_b=1, sampling="fixed", seed=0, max_iter=60) -> float:
    """Soft bound with known residuals at the batch count it will face.

    ``method="normal"`` uses the normal quantile with the true ``d`` and
    ``sigma_b``; ``"empirical"`` uses :func:`empirical_soft_bound` on
    ``residuals`` and falls back to the normal quantile when simulation is
    too costly.  For Poisson the bound and the tilted batch count are
    iterated to a fixed point.
    """
    def one(G):
        if method == "empirical":
            if residuals is None:
                raise InvalidConfigurationError("empirical bound needs the residual vector")
            a = empirical_soft_bound(residuals, m_b, G, p_tilde, sampling=sampling, seed=seed)
            if a is not None:
                return a
        return population_soft_bound(d, np.sqrt(sigma2_b), G, p_tilde)

    G = bound_batch_count(family, expected_G, d, None)
    a = one(G)
    for _ in range(max_iter):
        G_next = bound_batch_count(family, expected_G, d, a)
        if G_next <= G:
            break
        G = G_next
        a = one(G)
    return a


def subsample_bound_stats(residuals, n_eff: int, m_b: float):
    """``(d_hat, sigma_b_hat, m)`` from the pooled residuals of a subsample.

    ``sigma_b_hat**2 = n**2 / m_b * s**2`` with ``s**2`` the sample variance of
    the pooled residuals, matching ``V[dhat]`` for a batch of size ``m_b``.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    m = r.size
    if m < 2:
        return None
    d_hat = n_eff * float(np.mean(r))
    sigma_b_hat = n_eff * float(np.std(r, ddof=1)) / np.sqrt(m_b)
    return d_hat, sigma_b_hat, m


# ---------------------------------------------------------------- estimators


def _signs(x):
    return np.sign(x).astype(np.int64)


def poisson_log_estimates(x, G, lam, offset):
    """Vectorized Poisson estimator over replicates.

    Parameters
    ----------
    x : array
        Concatenated factors ``dhat - a`` of all replicates.
    G : int array
        Number of factors of each replicate (``sum(G) == x.size``).
    lam : float
    offset : float or array
        ``q + a`` per replicate.

    Returns
    -------
    (log_mag, sign) arrays of length ``len(G)``.
    """
    x = np.asarray(x, dtype=float)
    G = np.asarray(G, dtype=np.int64)
    R = G.size
    seg = np.repeat(np.arange(R), G)
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(x))
    zero = np.bincount(seg, weights=(x == 0), minlength=R) > 0
    neg = np.bincount(seg, weights=(x < 0), minlength=R).astype(np.int64)
    finite_logs = np.where(x == 0, 0.0, logs)
    log_mag = offset + lam + np.bincount(seg, weights=finite_logs, minlength=R) - G * np.log(lam)
    sign = np.where(neg % 2 == 1, -1, 1)
    sign = np.where(zero, 0, sign)
    log_mag = np.where(zero, -np.inf, log_mag)
    return log_mag, sign


def rg_log_estimates(x, G, epsilon, offset):
    """Vectorized randomly truncated series estimator; same layout as
    :func:`poisson_log_estimates`."""
    x = np.asarray(x, dtype=float)
    G = np.asarray(G, dtype=np.int64)
    R = G.size
    gmax = int(G.max()) if R else 0
    padded = np.zeros((R, gmax))
    mask = np.arange(gmax)[None, :] < G[:, None]
    padded[mask] = x
    with np.errstate(divide="ignore"):
        cum_log = np.cumsum(np.log(np.abs(padded)), axis=1)
    cum_sign = np.cumprod(np.sign(padded), axis=1) * mask
    g = np.arange(1, gmax + 1)
    weights = g * np.log1p(epsilon) - gammaln(g + 1)
    a = np.concatenate([np.zeros((R, 1)), weights[None, :] + cum_log], axis=1)
    b = np.concatenate([np.ones((R, 1)), cum_sign], axis=1)
    # Signed log-sum-exp by hand: scipy's version returns nan when the
    # largest terms cancel exactly.
    a = np.where(b == 0, -np.inf, a)
    top = a.max(axis=1, keepdims=True)
    total = np.sum(b * np.exp(a - top), axis=1)
    sgn = np.sign(total).astype(np.int64)
    with np.errstate(divide="ignore"):
        lse = np.where(sgn == 0, -np.inf, np.log(np.abs(total)) + top[:, 0] + offset)
    return lse, sgn


def poisson_estimate(dhat, lam, q, a) -> SignedLog:
    dhat = np.atleast_1d(np.asarray(dhat, dtype=float))
    if not lam > 0:
        raise InvalidConfigurationError("lam must be positive")
    lm, s = poisson_log_estimates(dhat - a, [dhat.size], lam, q + a)
    return SignedLog(float(lm[0]), int(s[0]))


def rg_estimate(dhat, epsilon, q, a) -> SignedLog:
    dhat = np.atleast_1d(np.asarray(dhat, dtype=float))
    if dhat.size == 0:
        return SignedLog(float(q + a), 1)
    lm, s = rg_log_estimates(dhat - a, [dhat.size], epsilon, q + a)
    return SignedLog(float(lm[0]), int(s[0]))


def estimate(config: EstimatorConfig, dhat, q, a=None) -> SignedLog:
    a = config.bound if a is None else a
    if config.family == "poisson":
        return poisson_estimate(dhat, config.lam, q, a)
    return rg_estimate(dhat, config.epsilon, q, a)


# ---------------------------------------------------------------- variances


def poisson_variance(q, a, d, sigma2_b, lam) -> float:
    """Exact variance of the Poisson estimator.

    Evaluated as ``exp(2(q+a) + 2(d-a)) * expm1(((lam - (d-a))**2 + sigma2_b) / lam)``
    which is algebraically identical to the textbook form and vanishes
    exactly at ``a = d - lam``, ``sigma2_b = 0``.  Overflow returns ``inf``
    with an :class:`EstimatorWarning`.
    """
    if not lam > 0:
        raise InvalidConfigurationError("lam must be positive")
    delta = d - a
    excess = ((lam - delta) ** 2 + sigma2_b) / lam
    if excess == 0:
        return 0.0
    log_expm1 = excess if excess > 700 else np.log(np.expm1(excess))
    log_var = 2.0 * (q + a) + 2.0 * delta + log_expm1
    if log_var > np.log(np.finfo(float).max):
        warnings.warn("Poisson variance overflows float64", EstimatorWarning, stacklevel=2)
        return np.inf
    return float(np.exp(log_var))


def loglik_variance_approx(d, a, sigma2_b, lam) -> float:
    """Delta-method approximation of ``V[log L]`` for the Poisson estimator."""
    delta = d - a
    if not delta > 0:
        raise ValueError("log-variance approximation requires d > a")
    if not lam > 0:
        raise InvalidConfigurationError("lam must be positive")
    r = sigma2_b / delta**2
    return float(lam * r + lam * (np.log(delta / lam) - 0.5 * r) ** 2)


def optimal_lambda(d, a, sigma2_b) -> float:
    """Variance-minimizing ``lam`` for fixed ``a``: ``sqrt(sigma2_b + (d - a)**2)``."""
    lam = float(np.sqrt(sigma2_b + (d - a) ** 2))
    if lam == 0.0:
        warnings.warn("degenerate optimal lambda (zero spread, d == a)", EstimatorWarning, stacklevel=2)
    return lam


# ---------------------------------------------------------------- tuning


@dataclass(frozen=True)
class TuningResult:
    config: EstimatorConfig
    sigma2_LL: float
    target: float
    clamped: bool

    @property
    def within_tolerance(self) -> bool:
        return abs(self.sigma2_LL - self.target) <= 0.1 * self.target


def rg_loglik_variance_mc(d, a, sigma2_b, epsilon, n_rep=4000, seed=0) -> float:
    """Monte Carlo ``V[log |L|]`` of the series estimator with normal batches."""
    rng = np.random.default_rng(seed)
    G = rng.geometric(epsilon / (1.0 + epsilon), size=n_rep) - 1
    x = d - a + np.sqrt(sigma2_b) * rng.standard_normal(int(G.sum()))
    lm, sgn = rg_log_estimates(x, G, epsilon, 0.0)
    lm = lm[sgn != 0]
    return float(np.var(lm))


def tune_config(
    target_sigma2_LL,
    d,
    a,
    sigma2_b_per_unit,
    expected_G,
    *,
    family="poisson",
    n_eff,
    p_tilde=DEFAULT_P_TILDE,
    sampling="fixed",
    n_rep=4000,
    seed=0,
    bound_method="normal",
    residuals=None,
) -> TuningResult:
    """Choose the batch size ``m_b`` that hits a target ``V[log L]``.

    ``expected_G`` is fixed first (``lam = E[G]`` or ``eps = 1/E[G]``); then
    the smallest ``m_b`` in ``[1, n_eff]`` whose log-likelihood variance is
    at or below the target is located, taking the neighbour closest to the
    target.  ``sigma2_b_per_unit`` is ``m_b * sigma2_b``, i.e.
    ``n * sum (d_k - dbar)**2``.  When ``a`` is None the bound is recomputed
    for each candidate ``m_b`` by :func:`calibrated_bound` with
    ``bound_method`` (``"empirical"`` needs the full ``residuals`` vector).

    The Poisson variance uses the delta-method formula; the series estimator
    uses a Monte Carlo estimate with common random numbers across ``m_b``.
    """
    if target_sigma2_LL <= 0:
        raise InvalidConfigurationError("target variance must be positive")
    if bound_method not in ("empirical", "normal"):
        raise InvalidConfigurationError(f"tuning cannot use bound method {bound_method!r}")
    cache = {}

    def bound_for(m_b):
        if a is not None:
            return float(a)
        if m_b not in cache:
            cache[m_b] = calibrated_bound(
                d, sigma2_b_per_unit / m_b, expected_G, p_tilde, family=family,
                method=bound_method, residuals=residuals, m_b=m_b, sampling=sampling, seed=seed,
            )
        return cache[m_b]

    def variance(m_b):
        s2 = sigma2_b_per_unit / m_b
        a_m = bound_for(m_b)
        if family == "poisson":
            if d - a_m <= 0:
                return np.inf
            return loglik_variance_approx(d, a_m, s2, expected_G)
        return rg_loglik_variance_mc(d, a_m, s2, 1.0 / expected_G, n_rep=n_rep, seed=seed)

    def build(m_b, clamped):
        cfg = EstimatorConfig.from_expected_G(
            family, expected_G, m_b=int(m_b), sampling=sampling, bound=bound_for(m_b), p_tilde=p_tilde
        )
        return TuningResult(cfg, float(variance(m_b)), float(target_sigma2_LL), clamped)

    stats_ = {"d": d, "a": a, "sigma2_b_per_unit": sigma2_b_per_unit, "expected_G": expected_G}
    if variance(1) <= target_sigma2_LL:
        warnings.warn("target variance reached at m_b = 1; clamped", EstimatorWarning, stacklevel=2)
        return build(1, True)
    grid = np.unique(np.round(np.geomspace(1, n_eff, 64)).astype(np.int64))
    values = np.array([variance(m) for m in grid])
    below = np.flatnonzero(values <= target_sigma2_LL)
    if below.size == 0:
        if values.min() <= 1.1 * target_sigma2_LL:
            return build(int(grid[np.argmin(values)]), False)
        raise InfeasibleTargetError(
            f"minimum attainable variance {values.min():.4g} exceeds target {target_sigma2_LL}",
            {**stats_, "min_sigma2_LL": float(values.min())},
        )
    lo, hi = int(grid[below[0] - 1]), int(grid[below[0]])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if variance(mid) <= target_sigma2_LL:
            hi = mid
        else:
            lo = mid
    best = min((lo, hi), key=lambda m: abs(variance(m) - target_sigma2_LL))
    return build(best, False)


def with_bound(config: EstimatorConfig, bound: float) -> EstimatorConfig:
    return replace(config, bound=float(bound))
