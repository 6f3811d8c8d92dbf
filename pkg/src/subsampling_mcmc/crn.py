"""Auxiliary randomness of the likelihood estimators and its correlated moves.

The number of batches ``G`` is driven by a standard normal latent ``v``
through ``G = F^{-1}(Phi(v))``.  Correlated proposals move ``v`` by an AR(1)
step, add fresh batches when ``G`` grows, delete random batches when it
shrinks and optionally move the inclusion indicators of surviving batches
through a two-state Markov chain that keeps their Bernoulli marginal.

Batches are stored as index arrays.  A with-replacement batch holds exactly
``m_b`` indices (duplicates allowed); a Bernoulli batch holds the sorted
indices of its included observations, which is the bitset in sparse form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln, log_ndtr, ndtri_exp

from .exceptions import InvalidConfigurationError

MODES = ("uncorrelated", "corr_g", "corr_gu")
_LOG_TAIL_FLOOR = -20000.0  # reaches latents far beyond any attained value


class GDistribution:
    """Distribution of the batch count with a cached inverse cdf.

    ``kind`` is ``"poisson"`` (parameter ``lam``) or ``"geometric"``
    (parameter ``epsilon``; support ``{0, 1, ...}``, ``Pr(G >= g) = (1+eps)**-g``).
    """

    def __init__(self, kind: str, param: float):
        if kind not in ("poisson", "geometric"):
            raise InvalidConfigurationError(f"unknown G distribution {kind!r}")
        if not param > 0:
            raise InvalidConfigurationError("G distribution parameter must be positive")
        self.kind = kind
        self.param = float(param)
        self._build_tables()

    @classmethod
    def for_config(cls, config) -> "GDistribution":
        if config.family == "poisson":
            return cls("poisson", config.lam)
        return cls("geometric", config.epsilon)

    def _frozen(self):
        if self.kind == "poisson":
            return stats.poisson(self.param)
        return stats.geom(self.param / (1.0 + self.param), loc=-1)

    def _build_tables(self):
        # Log-scale tables: under the signed target the batch count can sit
        # far in the upper tail, beyond where sf(g) is representable.
        if self.kind == "geometric":
            # The series estimator does not tilt G far, so a shallower floor suffices.
            upper = int(np.ceil(2000.0 / np.log1p(self.param)))
            g = np.arange(upper + 1)
            self._logsf = -(g + 1) * np.log1p(self.param)
            self._logcdf = np.log(-np.expm1(self._logsf))
        else:
            lam = self.param
            upper = int(2 * lam) + 64
            while g_logpmf(upper, lam) > _LOG_TAIL_FLOOR:
                upper *= 2
            g = np.arange(upper + 1)
            logpmf = g_logpmf(g, lam)
            rev = np.logaddexp.accumulate(logpmf[::-1])[::-1]
            self._logsf = np.append(rev[1:], -np.inf)
            self._logcdf = np.logaddexp.accumulate(logpmf)
        self._logsf = np.minimum(self._logsf, 0.0)
        self._logcdf = np.minimum(self._logcdf, 0.0)

    @property
    def mean(self) -> float:
        return self.param if self.kind == "poisson" else 1.0 / self.param

    @property
    def support_max(self) -> int:
        return self._logsf.size - 1

    def cdf(self, g):
        return self._frozen().cdf(g)

    def pmf(self, g):
        return self._frozen().pmf(g)

    def ppf_from_latent(self, v):
        """Smallest ``g`` with ``F(g) >= Phi(v)``, accurate in both tails."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 0:
            return int(self._ppf_from_latent_scalar(float(v)))
        return np.array([self._ppf_from_latent_scalar(x) for x in v.ravel()]).reshape(v.shape)

    def _ppf_from_latent_scalar(self, v):
        if v <= 0.0:
            g = int(np.searchsorted(self._logcdf, log_ndtr(v), side="left"))
        else:
            # F(g) >= Phi(v)  <=>  sf(g) <= Phi(-v); log sf is decreasing
            g = int(np.searchsorted(-self._logsf, -log_ndtr(-v), side="left"))
        return min(g, self.support_max)

    def latent_for(self, G: int) -> float:
        """A latent value mapping to ``G`` (midpoint of its probability step)."""
        G = min(int(G), self.support_max)
        lo = self._logcdf[G - 1] if G > 0 else -np.inf
        log_mid = np.logaddexp(lo, self._logcdf[G]) - np.log(2.0)
        if log_mid <= np.log(0.5):
            return float(ndtri_exp(log_mid))
        hi = self._logsf[G - 1] if G > 0 else 0.0
        return float(-ndtri_exp(np.logaddexp(hi, self._logsf[G]) - np.log(2.0)))


def g_logpmf(g, lam):
    g = np.asarray(g, dtype=float)
    return g * np.log(lam) - lam - gammaln(g + 1.0)


@dataclass(frozen=True)
class CorrelationParams:
    phi: float = 0.9999
    kappa: float = 0.9863
    mode: str = "corr_g"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfigurationError(f"unknown correlation mode {self.mode!r}")
        if not 0.0 <= self.phi <= 1.0:
            raise InvalidConfigurationError("phi must lie in [0, 1]")
        if not 0.0 <= self.kappa <= 1.0:
            raise InvalidConfigurationError("kappa must lie in [0, 1]")


def inclusion_transition_probs(kappa, m_b, n_eff):
    """``(Pr(1 -> 1), Pr(0 -> 1))`` of the within-batch indicator chain."""
    p = m_b / n_eff
    if p >= 1.0:
        if kappa != 1.0:
            raise InvalidConfigurationError("full inclusion (m_b = n) requires kappa = 1")
        return 1.0, 0.0
    join = (1.0 - kappa) * p / (1.0 - p)
    stay0 = 1.0 - join
    if not 0.0 <= stay0 <= 1.0:
        raise InvalidConfigurationError(
            f"kappa={kappa} with m_b/n={p:.4g} gives Pr(0->0)={stay0:.4g} outside [0, 1]"
        )
    return float(kappa), float(join)


class BlockSampler:
    """Draws and moves the index arrays of one batch."""

    def __init__(self, scheme: str, m_b: int, n_eff: int):
        if scheme not in ("fixed", "bernoulli"):
            raise InvalidConfigurationError(f"unknown sampling scheme {scheme!r}")
        if m_b < 1 or (scheme == "bernoulli" and m_b > n_eff):
            raise InvalidConfigurationError("m_b must be >= 1 (and <= n_eff for Bernoulli batches)")
        self.scheme = scheme
        self.m_b = int(m_b)
        self.n_eff = int(n_eff)
        self.p = self.m_b / self.n_eff

    def fresh(self, rng) -> np.ndarray:
        if self.scheme == "fixed":
            return rng.integers(0, self.n_eff, size=self.m_b)
        if self.p >= 1.0:
            return np.arange(self.n_eff)
        k = rng.binomial(self.n_eff, self.p)
        return np.sort(rng.choice(self.n_eff, size=k, replace=False))

    def fresh_blocks(self, count, rng):
        return [self.fresh(rng) for _ in range(count)]

    def mask(self, block) -> np.ndarray:
        out = np.zeros(self.n_eff, dtype=bool)
        out[block] = True
        return out


def _sample_complement(n, taken, count, rng):
    # Uniform `count`-subset of {0..n-1} \ taken (taken sorted).
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if taken.size > n // 2:
        comp = np.setdiff1d(np.arange(n), taken, assume_unique=True)
        return rng.choice(comp, size=count, replace=False)
    chosen = np.empty(0, dtype=np.int64)
    while chosen.size < count:
        cand = rng.integers(0, n, size=2 * (count - chosen.size) + 8)
        cand = cand[~np.isin(cand, taken, assume_unique=False)]
        cand = np.concatenate([chosen, cand])
        _, first = np.unique(cand, return_index=True)
        chosen = cand[np.sort(first)]
    return chosen[:count]


def propose_block_u(u_c, kappa, m_b, n_eff, rng) -> np.ndarray:
    """Move every inclusion indicator of a Bernoulli batch by the two-state chain.

    Included observations stay with probability ``kappa``; each excluded one
    joins independently with probability ``(1 - kappa) p / (1 - p)``,
    ``p = m_b / n``.  The joiners are drawn as a binomial count followed by a
    uniform subset of the excluded set, which has the same law.
    """
    stay1, join = inclusion_transition_probs(kappa, m_b, n_eff)
    u_c = np.asarray(u_c, dtype=np.int64)
    if stay1 == 1.0 and join == 0.0:
        return u_c
    kept = u_c[rng.random(u_c.size) < stay1]
    n_join = rng.binomial(n_eff - u_c.size, join)
    joined = _sample_complement(n_eff, u_c, n_join, rng)
    return np.sort(np.concatenate([kept, joined]))


@dataclass(frozen=True)
class CrnState:
    v: float
    G: int
    blocks: tuple

    def __post_init__(self):
        if len(self.blocks) != self.G:
            raise ValueError(f"expected {self.G} blocks, got {len(self.blocks)}")


def fresh_state(gdist: GDistribution, sampler: BlockSampler, rng, v=None) -> CrnState:
    """Independent draw of ``(v, G, blocks)``; ``v`` may be pinned."""
    v = float(rng.standard_normal()) if v is None else float(v)
    G = gdist.ppf_from_latent(v)
    return CrnState(v, G, tuple(sampler.fresh_blocks(G, rng)))


def propose_v_G(v_c: float, phi: float, gdist: GDistribution, rng):
    """AR(1) step of the latent and the induced batch count."""
    if not 0.0 <= phi <= 1.0:
        raise InvalidConfigurationError("phi must lie in [0, 1]")
    xi = rng.standard_normal()
    v_p = phi * v_c + np.sqrt(1.0 - phi * phi) * xi
    return float(v_p), gdist.ppf_from_latent(v_p)


def adjust_blocks(blocks, G_p, rng, sampler: BlockSampler, mode="corr_g", kappa=1.0):
    """Resize the batch list to ``G_p`` blocks.

    Growth appends fresh blocks; shrinkage removes uniformly chosen
    positions and keeps the survivors in order.  In ``"corr_gu"`` mode every
    surviving block is moved by :func:`propose_block_u`; in ``"corr_g"``
    survivors are returned as the same objects.
    """
    blocks = list(blocks)
    G_c = len(blocks)
    if G_p < G_c:
        drop = rng.choice(G_c, size=G_c - G_p, replace=False)
        keep = np.ones(G_c, dtype=bool)
        keep[drop] = False
        blocks = [b for b, k in zip(blocks, keep) if k]
    if mode == "corr_gu":
        if sampler.scheme != "bernoulli":
            raise InvalidConfigurationError("within-block correlation needs Bernoulli batches")
        blocks = [propose_block_u(b, kappa, sampler.m_b, sampler.n_eff, rng) for b in blocks]
    if G_p > G_c:
        blocks.extend(sampler.fresh_blocks(G_p - G_c, rng))
    return tuple(blocks)


def propose_state(state: CrnState, params: CorrelationParams, gdist, sampler, rng) -> CrnState:
    if params.mode == "uncorrelated":
        return fresh_state(gdist, sampler, rng)
    v_p, G_p = propose_v_G(state.v, params.phi, gdist, rng)
    return CrnState(v_p, G_p, adjust_blocks(state.blocks, G_p, rng, sampler, params.mode, params.kappa))
