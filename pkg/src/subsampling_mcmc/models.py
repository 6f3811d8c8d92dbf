"""AR(1) models with Student-t errors, uniform priors and data generation.

Each log-likelihood contribution depends on the data only through the pair
``z_k = (y_{k-1}, y_k)``, and only through the scalar error
``eps = y_k - mean(theta, y_{k-1})``, which is affine in ``z_k``.  The
derivatives in data space that the control variates need are therefore
obtained from the one-dimensional derivatives of the error log-density by
the chain rule.

Two parameterizations are supported:

``"M1"``  ``y_t = b0 + b1 * y_{t-1} + eps_t``,   ``theta = (b0, b1)``
``"M2"``  ``y_t = mu + rho * (y_{t-1} - mu) + eps_t``, ``theta = (mu, rho)``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import gammaln

from .exceptions import InvalidInputError, NonstationaryModelError

PARAMETERIZATIONS = ("M1", "M2")
PARAM_NAMES = {"M1": ("beta0", "beta1"), "M2": ("mu", "rho")}
WARMUP_STEPS = 1000


@dataclass(frozen=True)
class DataSet:
    """An observed series ``y`` and its lag pairs.

    ``z[k] = (y[k], y[k + 1])`` for ``k = 0 .. n - 2``; the first observation
    enters only as a lag.
    """

    y: np.ndarray
    z: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 1 or y.size < 2:
            raise InvalidInputError("y must be a 1-d series with at least 2 observations")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("y contains non-finite values")
        y.flags.writeable = False
        z = np.column_stack([y[:-1], y[1:]])
        z.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_eff(self) -> int:
        return self.y.size - 1


class UniformPrior:
    """Independent uniform priors on an open box.

    >>> UniformPrior([-5, 0], [5, 1]).logpdf([0.3, 0.6])
    0.0
    """

    def __init__(self, lower=(-5.0, 0.0), upper=(5.0, 1.0)):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise InvalidInputError("prior bounds require lower < upper coordinate-wise")

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))

    def logpdf(self, theta) -> float:
        # The normalizing constant cancels in every MH ratio, so 0 inside.
        return 0.0 if self.contains(theta) else -np.inf

    def __repr__(self):
        return f"UniformPrior(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


def log_prior(theta, prior: UniformPrior) -> float:
    return prior.logpdf(theta)


class AR1Model:
    """Base class for AR(1) models with an i.i.d. error density.

    Subclasses supply the error log-density and its first two derivatives
    (``_logpdf``, ``_dlogpdf``, ``_d2logpdf``); everything else is shared.
    The instance keeps two counters: ``n_contrib_evals`` (individual
    log-likelihood contributions) and ``n_deriv_evals`` (value/gradient/
    Hessian evaluations at an expansion point).
    """

    def __init__(self, parameterization: str = "M1"):
        if parameterization not in PARAMETERIZATIONS:
            raise InvalidInputError(f"unknown parameterization {parameterization!r}")
        self.parameterization = parameterization
        self.reset_counters()

    @property
    def param_names(self):
        return PARAM_NAMES[self.parameterization]

    def reset_counters(self):
        self.n_contrib_evals = 0
        self.n_deriv_evals = 0

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2,):
            raise InvalidInputError(f"theta must have length 2, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("theta contains non-finite values")
        return theta

    def intercept_slope(self, theta):
        """Return ``(c, s)`` with ``mean(theta, x) = c + s * x``."""
        if self.parameterization == "M1":
            return theta[0], theta[1]
        mu, rho = theta
        return mu * (1.0 - rho), rho

    def errors(self, theta, z) -> np.ndarray:
        c, s = self.intercept_slope(theta)
        z = np.asarray(z, dtype=float)
        return z[..., 1] - c - s * z[..., 0]

    # -- error density, overridden by subclasses
    def _logpdf(self, eps):
        raise NotImplementedError

    def _dlogpdf(self, eps):
        raise NotImplementedError

    def _d2logpdf(self, eps):
        raise NotImplementedError

    def mode_logpdf(self) -> float:
        return float(self._logpdf(np.float64(0.0)))

    def loglik_contrib(self, theta, z):
        """Log-likelihood contribution(s) of lag pair(s) ``z`` (last axis of size 2)."""
        theta = self.check_theta(theta)
        z = np.asarray(z, dtype=float)
        if z.shape[-1:] != (2,):
            raise InvalidInputError("z must have a trailing dimension of size 2")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("z contains non-finite values")
        return self._contrib(theta, z)

    def _contrib(self, theta, z):
        # Unchecked fast path used inside samplers.
        out = self._logpdf(self.errors(theta, z))
        self.n_contrib_evals += int(np.size(out))
        return out

    def full_loglik(self, theta, data: DataSet) -> float:
        theta = self.check_theta(theta)
        return float(np.sum(self._contrib(theta, data.z)))

    def value_grad_hess(self, theta, z):
        """Value, gradient and Hessian of ``z -> loglik_contrib(theta, z)``.

        Vectorized over leading axes of ``z``: returns arrays of shapes
        ``(...)``, ``(..., 2)`` and ``(..., 2, 2)``.
        """
        theta = self.check_theta(theta)
        return self._value_grad_hess(theta, np.asarray(z, dtype=float))

    def _value_grad_hess(self, theta, z):
        _, s = self.intercept_slope(theta)
        eps = self.errors(theta, z)
        value = self._logpdf(eps)
        d1 = self._dlogpdf(eps)
        d2 = self._d2logpdf(eps)
        # d eps / d z = (-s, 1)
        jac = np.array([-s, 1.0])
        grad = d1[..., None] * jac
        hess = d2[..., None, None] * np.outer(jac, jac)
        self.n_deriv_evals += int(np.size(value))
        return value, grad, hess

    def __repr__(self):
        return f"{type(self).__name__}(parameterization={self.parameterization!r})"


class AR1StudentT(AR1Model):
    """AR(1) with Student-t errors of fixed degrees of freedom ``nu``.

    The log-density carries its full normalizing constant.
    """

    def __init__(self, parameterization: str = "M1", nu: float = 5.0):
        super().__init__(parameterization)
        nu = float(nu)
        if not (np.isfinite(nu) and nu > 0):
            raise InvalidInputError("nu must be a positive finite number")
        self.nu = nu
        self._log_norm = (
            gammaln((nu + 1.0) / 2.0) - gammaln(nu / 2.0) - 0.5 * np.log(nu * np.pi)
        )

    def _logpdf(self, eps):
        return self._log_norm - 0.5 * (self.nu + 1.0) * np.log1p(eps * eps / self.nu)

    def _dlogpdf(self, eps):
        return -(self.nu + 1.0) * eps / (self.nu + eps * eps)

    def _d2logpdf(self, eps):
        e2 = eps * eps
        return -(self.nu + 1.0) * (self.nu - e2) / (self.nu + e2) ** 2

    def sample_errors(self, rng, size):
        return rng.standard_t(self.nu, size=size)

    def __repr__(self):
        return f"AR1StudentT(parameterization={self.parameterization!r}, nu={self.nu})"


def full_loglik(model: AR1Model, theta, data: DataSet) -> float:
    return model.full_loglik(theta, data)


def generate_ar1(n: int, model: AR1StudentT, theta, seed: int) -> DataSet:
    """Simulate ``n`` observations from ``model`` at ``theta``.

    The recursion starts at the process mean and runs ``WARMUP_STEPS``
    discarded steps before the first kept observation.
    """
    if n < 2:
        raise InvalidInputError("n must be at least 2")
    theta = model.check_theta(theta)
    c, s = model.intercept_slope(theta)
    if abs(s) >= 1.0:
        raise NonstationaryModelError(f"slope {s} gives a nonstationary process")
    rng = np.random.default_rng(seed)
    eps = model.sample_errors(rng, WARMUP_STEPS + n)
    start = c / (1.0 - s)
    # y_t - s * y_{t-1} = c + eps_t, with y_0 = start
    y, _ = lfilter([1.0], [1.0, -s], c + eps, zi=np.array([s * start]))
    return DataSet(y[WARMUP_STEPS:])
