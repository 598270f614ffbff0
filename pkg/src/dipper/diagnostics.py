"""Convergence diagnostics and posterior summaries.

R-hat is the rank-normalized split version (the larger of the bulk and the
folded/tail value) and ESS the rank-normalized bulk estimate with Geyer's
initial monotone sequence truncation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from ._validation import DegenerateDrawsWarning

__all__ = [
    "DegenerateDrawsWarning",
    "FeatureSummary",
    "split_rhat",
    "ess_bulk",
    "rank_normalize",
    "quantile",
    "summarize",
]


def _as_3d(draws):
    x = np.asarray(getattr(draws, "draws", draws), dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("draws must have shape (chains, draws[, parameters])")
    return x


def _split(x):
    """(chains, draws) -> (2 * chains, draws // 2), dropping a middle draw if odd."""
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def rank_normalize(x):
    """Normal scores of the pooled ranks, keeping the input shape."""
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x):
    n = x.shape[1]
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    return float(np.sqrt((between / within + n - 1.0) / n))


def _degenerate(x):
    return not np.all(np.isfinite(x)) or np.ptp(x) == 0.0


def split_rhat(draws) -> np.ndarray:
    """Rank-normalized split R-hat per parameter.

    Parameters whose draws are all identical (or non-finite) get NaN and
    trigger a :class:`DegenerateDrawsWarning`.
    """
    x = _as_3d(draws)
    if x.shape[0] < 2 and x.shape[1] < 8:
        raise ValueError("need at least 2 chains or enough draws to split")
    if x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    out = np.empty(x.shape[2])
    flagged = []
    for k in range(x.shape[2]):
        xk = x[:, :, k]
        if _degenerate(xk):
            out[k] = np.nan
            flagged.append(k)
            continue
        bulk = _rhat_basic(_split(rank_normalize(xk)))
        folded = np.abs(xk - np.median(xk))
        tail = bulk if np.ptp(folded) == 0 else _rhat_basic(_split(rank_normalize(folded)))
        out[k] = max(bulk, tail)
    if flagged:
        warnings.warn(
            f"R-hat undefined for constant parameters {flagged}", DegenerateDrawsWarning,
            stacklevel=2,
        )
    return out


def _autocov(x):
    """Biased per-chain autocovariance via FFT, shape (chains, draws)."""
    n = x.shape[1]
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=m, axis=1)[:, :n]
    return acov / n


def _ess_basic(x):
    n_chain, n_draw = x.shape
    acov = _autocov(x)
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    rho = np.zeros(n_draw)
    mean_acov = acov.mean(axis=0)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    # initial positive sequence: stop at the first negative paired sum
    t = 1
    while t < n_draw - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - mean_acov[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - mean_acov[t + 2]) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    total = n_chain * n_draw
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + np.sum(rho[max_t + 1: max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess_bulk(draws) -> np.ndarray:
    """Bulk effective sample size per parameter (NaN + warning if constant)."""
    x = _as_3d(draws)
    if x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    out = np.empty(x.shape[2])
    flagged = []
    for k in range(x.shape[2]):
        xk = x[:, :, k]
        if _degenerate(xk):
            out[k] = np.nan
            flagged.append(k)
            continue
        out[k] = _ess_basic(_split(rank_normalize(xk)))
    if flagged:
        warnings.warn(
            f"ESS undefined for constant parameters {flagged}", DegenerateDrawsWarning,
            stacklevel=2,
        )
    return out


def quantile(x, q, axis=0):
    """Quantiles by linear interpolation of order statistics.

    Position ``h = (n - 1) q`` on the sorted sample, interpolating between
    ``x[floor(h)]`` and ``x[floor(h) + 1]``.
    """
    return np.quantile(np.asarray(x, dtype=float), q, axis=axis, method="linear")


@dataclass(frozen=True)
class FeatureSummary:
    feature_id: object
    median: float
    ci_low: float
    ci_high: float
    significant: bool
    alpha: float

    @property
    def direction(self) -> int:
        return int(np.sign(self.median))


def summarize(draws, feature_ids=None, alpha: float = 0.10, index=None) -> list:
    """Median and equal-tailed ``1 - alpha`` interval per feature.

    ``draws`` is either a ``(samples, K)`` array of group effects or a
    :class:`~dipper.sampler.PosteriorDraws` with ``index`` selecting the
    group-effect columns. A feature is significant when its interval excludes
    zero.
    """
    if hasattr(draws, "draws"):
        x = draws.flat()
        if index is not None:
            x = x[:, index]
    else:
        x = np.asarray(draws, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if index is not None:
            x = x[:, index]
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    if feature_ids is None:
        feature_ids = list(range(x.shape[1]))
    qs = quantile(x, [alpha / 2.0, 0.5, 1.0 - alpha / 2.0], axis=0)
    out = []
    for j, fid in enumerate(feature_ids):
        lo, med, hi = (float(v) for v in qs[:, j])
        out.append(
            FeatureSummary(
                feature_id=fid,
                median=med,
                ci_low=lo,
                ci_high=hi,
                significant=bool(lo > 0.0 or hi < 0.0),
                alpha=alpha,
            )
        )
    return out
