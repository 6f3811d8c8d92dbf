"""Sign-corrected estimates, inefficiency factors, cost and density summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateDenominatorError, DegenerateSeriesError, InvalidInputError

ALPHAS = (0.10, 0.25, 0.50, 0.75, 0.90)


def importance_estimate(h_values, signs) -> float:
    """``sum(h * s) / sum(s)`` over the recorded iterates."""
    h = np.asarray(h_values, dtype=float)
    s = np.asarray(signs, dtype=float)
    if h.shape != s.shape or h.size == 0:
        raise InvalidInputError("h and signs must be non-empty and of equal length")
    den = np.sum(s)
    if den == 0:
        raise DegenerateDenominatorError("signs sum to zero")
    return float(np.sum(h * s) / den)


def quantile_mce_ise(draws, signs, c_alpha, coordinate=0):
    """Estimates of ``Pr(theta_j <= c_alpha)``: plain mean and sign-corrected."""
    draws = np.asarray(draws, dtype=float)
    col = draws[:, coordinate] if draws.ndim == 2 else draws
    h = (col <= c_alpha).astype(float)
    signs = np.asarray(signs)
    mce = float(np.sum(h) / h.size)
    return mce, importance_estimate(h, signs)


def autocorrelation(series) -> np.ndarray:
    """Biased (divide-by-N) sample autocorrelations at lags ``0 .. N-1``."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = x.size
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0:
        raise DegenerateSeriesError("series has zero variance")
    return acov / acov[0]


def inefficiency_factor(series) -> float:
    """``1 + 2 sum rho_l`` truncated by Geyer's initial positive sequence.

    The sum stops before the first pair ``rho_{2t} + rho_{2t+1} <= 0``.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise InvalidInputError("need at least 100 draws for an inefficiency factor")
    rho = autocorrelation(x)
    m = rho.size // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    t = nonpos[0] if nonpos.size else m
    return float(-1.0 + 2.0 * np.sum(pairs[:t]))


def realized_cost(proposed_G, m_b, K, n_eff):
    """``(m_bar_r, (m_bar_r + K) / n_eff)`` with ``m_bar_r = mean(proposed G) * m_b``."""
    g = np.asarray(proposed_G, dtype=float)
    if g.size == 0:
        raise InvalidInputError("no proposals recorded")
    m_bar_r = float(np.mean(g)) * m_b
    return m_bar_r, (m_bar_r + K) / n_eff


@dataclass(frozen=True)
class ChainStats:
    IF: np.ndarray  # one per parameter
    cost_fraction: float
    m_bar_r: float = float("nan")
    sign_rate: float = 0.0

    def __post_init__(self):
        if not self.cost_fraction > 0:
            raise InvalidInputError("cost must be positive")


def chain_stats(chain) -> ChainStats:
    """Statistics of a :class:`~subsampling_mcmc.sampler.ChainResult`."""
    IF = np.array([inefficiency_factor(chain.theta[:, j]) for j in range(chain.theta.shape[1])])
    meta = chain.metadata
    if meta.get("method") == "mh":
        return ChainStats(IF, 1.0, float(meta.get("n_eff", np.nan)), 0.0)
    m_bar_r, frac = realized_cost(chain.proposed_G, meta["m_b"], meta["K"], meta["n_eff"])
    return ChainStats(IF, frac, m_bar_r, chain.negative_fraction)


def effective_draws_relative(stats_method: ChainStats, stats_baseline: ChainStats):
    """Efficiency relative to a baseline: ``(IF_b * c_b) / (IF_m * c_m)``.

    Larger is better; per parameter when the ``IF`` fields are arrays.
    """
    num = np.asarray(stats_baseline.IF) * stats_baseline.cost_fraction
    den = np.asarray(stats_method.IF) * stats_method.cost_fraction
    out = num / den
    return float(out) if out.ndim == 0 else out


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return float(0.9 * spread * x.size ** -0.2)


def kde_grid(draws, grid, bandwidth="silverman") -> np.ndarray:
    """Gaussian kernel density of ``draws`` evaluated on ``grid``."""
    x = np.asarray(draws, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float)
    if x.size < 2:
        raise InvalidInputError("need at least 2 draws")
    bw = silverman_bandwidth(x) if bandwidth in (None, "silverman", "auto") else float(bandwidth)
    if not bw > 0:
        raise DegenerateSeriesError("draws have no spread; supply a bandwidth")
    out = np.zeros(grid.size)
    chunk = max(1, 2_000_000 // max(grid.size, 1))
    for start in range(0, x.size, chunk):
        u = (grid[None, :] - x[start : start + chunk, None]) / bw
        out += np.exp(-0.5 * u * u).sum(axis=0)
    return out / (x.size * bw * np.sqrt(2.0 * np.pi))


def default_grid(draws, bandwidth=None, num=400):
    x = np.asarray(draws, dtype=float)
    bw = silverman_bandwidth(x) if bandwidth is None else bandwidth
    return np.linspace(x.min() - 5 * bw, x.max() + 5 * bw, num)


# ---------------------------------------------------------------- tables


def quantile_table(chains: dict, baseline, alphas=ALPHAS, param_names=None):
    """Rows ``(method, parameter, alpha, c_alpha, mce, ise)``.

    Thresholds ``c_alpha`` are the baseline chain's empirical quantiles.
    """
    rows = []
    dim = baseline.theta.shape[1]
    names = param_names or [f"theta{j}" for j in range(dim)]
    for j in range(dim):
        c = np.quantile(baseline.theta[:, j], alphas)
        for method, chain in chains.items():
            for alpha, c_alpha in zip(alphas, c):
                mce, ise = quantile_mce_ise(chain.theta, chain.sign, c_alpha, j)
                rows.append(
                    {"method": method, "parameter": names[j], "alpha": alpha,
                     "c_alpha": float(c_alpha), "mce": mce, "ise": ise}
                )
    return rows


def cost_table(chains: dict, baseline, param_names=None):
    """Rows ``(method, parameter, sampling_fraction, IF, ED_rel, sign_rate)``."""
    base = chain_stats(baseline)
    dim = baseline.theta.shape[1]
    names = param_names or [f"theta{j}" for j in range(dim)]
    rows = []
    for method, chain in chains.items():
        st = chain_stats(chain)
        ed = np.atleast_1d(effective_draws_relative(st, base))
        for j in range(dim):
            rows.append(
                {"method": method, "parameter": names[j], "sampling_fraction": st.cost_fraction,
                 "IF": float(st.IF[j]), "ED_rel": float(ed[j]), "sign_rate": st.sign_rate}
            )
    return rows
