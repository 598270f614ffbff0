"""Evaluation protocol: synthetic corpora, null error rates and replication.

The null-data error rate ``lambda`` is the share of null datasets with any
significant finding; under the global null it equals the false discovery
rate, so a valid procedure keeps it at or below ``alpha``. Replication
compares significance calls between two datasets: a feature significant in
both with the same sign replicates, with opposite signs it conflicts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import binomtest

from ._validation import CapabilityError, DataError
from .data import FeatureTable
from .diagnostics import quantile
from .model import al_sample

__all__ = [
    "SyntheticSpec",
    "generate_synthetic",
    "SignificanceCall",
    "calls_from_results",
    "NullErrorReport",
    "wilson_interval",
    "null_error_rate",
    "CountReport",
    "count_significant",
    "ReplicationReport",
    "replication_counts",
    "ThresholdResults",
    "DrawResults",
    "stored_results",
    "alpha_sweep",
    "direction_imbalance",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for a synthetic presence/absence study.

    Parameters
    ----------
    n_case, n_control : int
        Samples per group.
    n_features : int
    fraction_nonnull : float
        Probability that a feature has a nonzero group effect.
    effect_tau, effect_nu : float
        Asymmetric Laplace scale and skewness of nonzero effects; ``nu``
        is the probability that an effect is negative.
    prevalence_beta : (float, float)
        Beta distribution of baseline prevalence (before read effects).
    log10_reads : (float, float)
        Uniform range of per-sample log10 total reads.
    reads_effect : float
        True coefficient on centered log10 reads.
    seed : int
    """

    n_case: int = 50
    n_control: int = 50
    n_features: int = 100
    fraction_nonnull: float = 0.2
    effect_tau: float = 0.5
    effect_nu: float = 0.5
    prevalence_beta: tuple = (1.0, 2.0)
    log10_reads: tuple = (4.0, 5.0)
    reads_effect: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prevalence_beta", tuple(float(v) for v in self.prevalence_beta))
        object.__setattr__(self, "log10_reads", tuple(float(v) for v in self.log10_reads))
        if not 0.0 <= self.fraction_nonnull <= 1.0:
            raise ValueError("fraction_nonnull must lie in [0, 1]")
        if self.n_case < 1 or self.n_control < 1 or self.n_features < 1:
            raise ValueError("group sizes and n_features must be positive")
        if not self.effect_tau > 0 or not 0.0 < self.effect_nu < 1.0:
            raise ValueError("need effect_tau > 0 and 0 < effect_nu < 1")
        lo, hi = self.log10_reads
        if not lo <= hi:
            raise ValueError("log10_reads must be an increasing pair")

    def to_dict(self) -> dict:
        return asdict(self)


def _draw_effects(spec: SyntheticSpec, rng):
    k = spec.n_features
    p0 = rng.beta(*spec.prevalence_beta, size=k)
    alpha = logit(np.clip(p0, 1e-3, 1.0 - 1e-3))
    nonnull = rng.random(k) < spec.fraction_nonnull
    beta = np.where(nonnull, al_sample(rng, k, 0.0, spec.effect_tau, spec.effect_nu), 0.0)
    return alpha, beta


def generate_synthetic(spec: SyntheticSpec, effects=None, sample_seed=None):
    """Simulate a table and its ground truth.

    Parameters
    ----------
    spec : SyntheticSpec
    effects : (alpha, beta) arrays, optional
        Reuse the ground truth of another dataset (planted replicas). Drawn
        from ``spec`` when omitted.
    sample_seed : int, optional
        Seed for the samples when ``effects`` is given; defaults to
        ``spec.seed``.

    Returns
    -------
    table : FeatureTable
        Integer counts (zero exactly when absent) with group and reads.
    truth : dict
        ``alpha``, ``beta`` and ``nonnull`` per feature.
    """
    rng = np.random.default_rng(spec.seed)
    if effects is None:
        alpha, beta = _draw_effects(spec, rng)
    else:
        alpha, beta = (np.asarray(e, dtype=float) for e in effects)
        rng = np.random.default_rng(spec.seed if sample_seed is None else sample_seed)
    n = spec.n_case + spec.n_control
    group = np.r_[np.zeros(spec.n_control, dtype=int), np.ones(spec.n_case, dtype=int)]
    log_reads = rng.uniform(*spec.log10_reads, size=n)
    reads = np.round(10.0**log_reads)
    centered = np.log10(reads) - np.log10(reads).mean()
    eta = alpha[None, :] + np.outer(group, beta) + spec.reads_effect * centered[:, None]
    present = rng.random(eta.shape) < expit(eta)
    counts = present * (1 + rng.poisson(10.0, size=eta.shape))
    width = len(str(spec.n_features))
    table = FeatureTable(
        sample_ids=[f"s{i + 1:0{len(str(n))}d}" for i in range(n)],
        feature_ids=[f"f{j + 1:0{width}d}" for j in range(spec.n_features)],
        counts=counts.astype(float),
        total_reads=reads,
        group=group,
    )
    return table, {"alpha": alpha, "beta": beta, "nonnull": beta != 0.0}


@dataclass(frozen=True)
class SignificanceCall:
    feature_id: object
    direction: str  # "positive" or "negative"
    significant: bool
    method: str = ""
    alpha: float = 0.10

    def __post_init__(self):
        if self.direction not in ("positive", "negative", "zero"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.significant and self.direction == "zero":
            raise ValueError("a significant call needs a nonzero estimate")


def _direction(estimate):
    if estimate is None or not np.isfinite(estimate) or estimate == 0:
        return "zero"
    return "positive" if estimate > 0 else "negative"


def calls_from_results(results, alpha=None, direction_source=None) -> list:
    """Significance calls from result rows.

    ``direction_source`` optionally maps feature id to an estimate whose sign
    overrides the row's own (for methods without usable point estimates).
    Rows without a finite estimate are never significant.
    """
    out = []
    for r in results:
        est = r.estimate
        if direction_source is not None and r.feature_id in direction_source:
            est = direction_source[r.feature_id]
        d = _direction(est)
        out.append(SignificanceCall(r.feature_id, d, bool(r.significant and d != "zero"),
                                    r.method, alpha if alpha is not None else np.nan))
    return out


def wilson_interval(k, n, level=0.90):
    """Wilson score interval for a binomial proportion."""
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class NullErrorReport:
    n_datasets: int
    n_with_any_finding: int
    lambda_: float
    ci_low: float
    ci_high: float
    flags: tuple = ()
    dataset_ids: tuple = ()
    level: float = 0.90

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d


def null_error_rate(datasets, runner=None, alpha=0.10, dataset_ids=None, level=0.90):
    """Share of null datasets with at least one significant finding.

    Parameters
    ----------
    datasets : sequence
        Null datasets; passed to ``runner``. With ``runner=None`` each entry
        is already a sequence of results (objects with ``significant``) or
        a boolean significance vector.
    runner : callable, optional
        ``runner(dataset, alpha)`` returning result rows.
    alpha : float
    level : float
        Confidence level of the Wilson interval for ``lambda``.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    flags = []
    for ds in datasets:
        res = runner(ds, alpha) if runner is not None else ds
        flags.append(bool(any(_is_sig(r) for r in res)))
    n, k = len(flags), int(sum(flags))
    lo, hi = wilson_interval(k, n, level)
    lam = k / n
    ids = tuple(dataset_ids) if dataset_ids is not None else tuple(range(n))
    return NullErrorReport(n, k, lam, min(lo, lam), max(hi, lam), tuple(flags), ids, level)


def _is_sig(r):
    return bool(getattr(r, "significant", r))


@dataclass(frozen=True)
class CountReport:
    counts: tuple
    proportions: tuple
    mean_count: float
    median_count: float
    mean_proportion: float
    median_proportion: float


def count_significant(results_per_dataset) -> CountReport:
    """Significant findings per dataset and their corpus-level summaries."""
    counts, props = [], []
    for res in results_per_dataset:
        res = list(res)
        c = sum(_is_sig(r) for r in res)
        counts.append(int(c))
        props.append(c / len(res) if res else 0.0)
    if not counts:
        raise ValueError("need at least one dataset")
    return CountReport(
        counts=tuple(counts),
        proportions=tuple(props),
        mean_count=float(np.mean(counts)),
        median_count=float(quantile(counts, 0.5)),
        mean_proportion=float(np.mean(props)),
        median_proportion=float(quantile(props, 0.5)),
    )


@dataclass(frozen=True)
class ReplicationReport:
    pair_id: str
    n_replicated: int
    n_conflicting: int
    replicated: tuple = ()
    conflicting: tuple = ()
    curve: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return asdict(self)


def _index_calls(calls, name):
    out = {}
    for c in calls:
        if c.feature_id in out:
            raise DataError(f"duplicate feature id {c.feature_id!r} in {name}")
        out[c.feature_id] = c
    return out


def replication_counts(calls_a, calls_b, pair_id="pair", curve=()) -> ReplicationReport:
    """Replicated and conflicting findings between two datasets.

    Features present in only one list are ignored.

    Raises
    ------
    DataError
        If a feature id repeats within one list.
    """
    a = _index_calls(calls_a, "calls_a")
    b = _index_calls(calls_b, "calls_b")
    rep, conf = [], []
    for fid, ca in a.items():
        cb = b.get(fid)
        if cb is None or not (ca.significant and cb.significant):
            continue
        (rep if ca.direction == cb.direction else conf).append(fid)
    return ReplicationReport(pair_id, len(rep), len(conf), tuple(rep), tuple(conf), tuple(curve))


class ThresholdResults:
    """Stored frequentist results; significant at ``alpha`` when ``q < alpha``."""

    def __init__(self, feature_ids, estimates, q, method=""):
        self.feature_ids = list(feature_ids)
        self.estimates = np.array([np.nan if e is None else e for e in estimates], dtype=float)
        self.q = np.array([np.nan if v is None else v for v in q], dtype=float)
        self.method = method

    @classmethod
    def from_results(cls, results):
        results = list(results)
        method = results[0].method if results else ""
        return cls([r.feature_id for r in results], [r.estimate for r in results],
                   [r.q for r in results], method)

    def calls(self, alpha) -> list:
        out = []
        for fid, est, q in zip(self.feature_ids, self.estimates, self.q):
            d = _direction(est)
            sig = bool(np.isfinite(q) and q < alpha and d != "zero")
            out.append(SignificanceCall(fid, d, sig, self.method, alpha))
        return out


class DrawResults:
    """Stored posterior draws; significance re-derived from intervals at ``alpha``.

    ``draws`` has shape ``(n_draws, K)`` (or ``(chains, draws, K)``).
    Direction follows the sign of the posterior median. At ``alpha = 0``
    the interval is the whole support and nothing is significant.
    """

    def __init__(self, feature_ids, draws, method="dipper"):
        d = np.asarray(draws, dtype=float)
        self.draws = d.reshape(-1, d.shape[-1])
        self.feature_ids = list(feature_ids)
        self.method = method
        if self.draws.shape[1] != len(self.feature_ids):
            raise ValueError("draws and feature_ids disagree")

    def calls(self, alpha) -> list:
        med = quantile(self.draws, 0.5, axis=0)
        if alpha <= 0.0:
            sig = np.zeros(len(self.feature_ids), dtype=bool)
        else:
            lo, hi = quantile(self.draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
            sig = (lo > 0.0) | (hi < 0.0)
        out = []
        for fid, m, s in zip(self.feature_ids, med, sig):
            d = _direction(m)
            out.append(SignificanceCall(fid, d, bool(s and d != "zero"), self.method, alpha))
        return out


def stored_results(results, draws=None, feature_ids=None):
    """Wrap result rows for :func:`alpha_sweep`.

    Bayesian rows (method starting with ``dipper``) need their draws.

    Raises
    ------
    CapabilityError
        If Bayesian results come without draws.
    """
    results = list(results)
    bayes = bool(results) and str(results[0].method).startswith("dipper")
    if bayes:
        if draws is None:
            raise CapabilityError("re-deriving Bayesian significance needs the stored draws")
        fids = feature_ids if feature_ids is not None else [r.feature_id for r in results]
        return DrawResults(fids, draws, results[0].method)
    return ThresholdResults.from_results(results)


def alpha_sweep(results_a, results_b, alphas) -> list:
    """``(alpha, n_replicated, n_conflicting)`` at each significance level.

    ``results_a`` and ``results_b`` are :class:`ThresholdResults` or
    :class:`DrawResults` (see :func:`stored_results`).
    """
    out = []
    for a in alphas:
        if not 0.0 <= a < 1.0:
            raise ValueError("alphas must lie in [0, 1)")
        rep = replication_counts(results_a.calls(a), results_b.calls(a))
        out.append((float(a), rep.n_replicated, rep.n_conflicting))
    return out


def direction_imbalance(calls):
    """``(n_positive, n_negative, majority proportion)`` among significant calls.

    The proportion is ``None`` when nothing is significant.
    """
    sig = [c for c in calls if c.significant]
    pos = sum(c.direction == "positive" for c in sig)
    neg = sum(c.direction == "negative" for c in sig)
    if pos + neg == 0:
        return pos, neg, None
    return pos, neg, max(pos, neg) / (pos + neg)

