"""Per-feature logistic regression baselines.

Maximum likelihood is fitted by iteratively reweighted least squares and
tested by Wald or likelihood-ratio statistics; Firth's bias-reduced fit
maximizes ``loglik + 0.5 * log det I(beta)`` and is tested with the
penalized likelihood ratio. Multiplicity is handled by Benjamini-Hochberg
across features.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.special import expit

from ._validation import ConvergenceError, DesignError, check_alpha

__all__ = [
    "GlmFit",
    "TestResult",
    "irls_fit",
    "wald_test",
    "lrt_test",
    "firth_fit",
    "firth_plrt",
    "bh_adjust",
    "feature_design",
    "run_feature_tests",
    "run_frequentist_dpa",
    "METHODS",
]

METHODS = ("wald", "lrt", "firth")

SEPARATION_BOUND = 15.0
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
FIRTH_MAX_ITER = 200


@dataclass
class GlmFit:
    """Logistic regression fit on the log-odds scale.

    ``cov_matrix`` is the inverse Fisher information at the optimum. A
    separated fit has at least one coefficient beyond
    ``SEPARATION_BOUND`` or failed to converge with diverging coefficients;
    its coefficients and covariance are not meaningful.
    """

    coefficients: np.ndarray
    cov_matrix: np.ndarray
    log_likelihood: float
    converged: bool
    separated: bool
    n_iter: int = 0
    penalized_log_likelihood: float | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_matrix), 0.0, None))


@dataclass
class TestResult:
    """One feature's test; ``None`` marks a non-finite (absent) quantity."""

    feature_id: object
    method: str
    estimate: float | None = None
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    p: float | None = None
    q: float | None = None
    significant: bool = False
    statistic: float | None = None
    note: str = ""

    __test__ = False  # not a pytest class


def _loglik(y, eta):
    # sum y*eta - log(1 + exp(eta)), overflow-safe
    return float(np.dot(y, eta) - np.sum(np.logaddexp(0.0, eta)))


def _check_inputs(y, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"y has {y.shape[0]} entries but X has {X.shape[0]} rows")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("y must be binary")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError(f"design matrix has rank < {X.shape[1]} columns")
    return y, X


def _solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _inverse(A):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A)


def _information(X, eta):
    p = expit(eta)
    w = p * (1.0 - p)
    return (X * w[:, None]).T @ X, p, w


def irls_fit(y, X, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER, offset=None) -> GlmFit:
    """Maximum-likelihood logistic regression by IRLS.

    Parameters
    ----------
    y : array of shape (n,)
        Binary response.
    X : array of shape (n, p)
        Full design including any intercept column; must have full column
        rank.
    tol : float
        Convergence when the largest coefficient change is below ``tol``.
    max_iter : int
        Iteration cap.

    Returns
    -------
    GlmFit
        ``separated`` is set when a coefficient exceeds 15 in magnitude or the
        iterations stop without converging while the likelihood still rises.
        Under separation the likelihood approaches its supremum, so
        ``log_likelihood`` remains usable for deviance comparisons.

    Raises
    ------
    DesignError
        If ``X`` is rank deficient.
    """
    y, X = _check_inputs(y, X)
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(X.shape[1])
    ll = _loglik(y, off)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        eta = off + X @ beta
        info, p, _ = _information(X, eta)
        step = _solve(info, X.T @ (y - p))
        # halve until the likelihood does not drop
        for _ in range(30):
            new = beta + step
            ll_new = _loglik(y, off + X @ new)
            if ll_new >= ll - 1e-12:
                break
            step = step / 2.0
        beta, ll_prev, ll = new, ll, ll_new
        if np.max(np.abs(step)) < tol:
            converged = True
            break
        if np.max(np.abs(beta)) > SEPARATION_BOUND and abs(ll - ll_prev) < 1e-12:
            # the likelihood has reached its supremum along the separating direction
            break
    info, _, _ = _information(X, off + X @ beta)
    separated = bool(np.max(np.abs(beta)) > SEPARATION_BOUND or not converged)
    return GlmFit(
        coefficients=beta,
        cov_matrix=_inverse(info),
        log_likelihood=ll,
        converged=converged,
        separated=separated,
        n_iter=n_iter,
    )


def _z(alpha):
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def wald_test(fit: GlmFit, index=1, alpha=0.10, feature_id=None) -> TestResult:
    """Wald z-test and interval for one coefficient.

    Separated fits have no finite estimate, so every numeric field is absent.
    """
    alpha = check_alpha(alpha)
    if fit.separated:
        return TestResult(feature_id, "wald", note="separation")
    est = float(fit.coefficients[index])
    se = float(fit.se[index])
    if not (math.isfinite(se) and se > 0):
        return TestResult(feature_id, "wald", note="singular information")
    stat = est / se
    p = float(2.0 * stats.norm.sf(abs(stat)))
    z = _z(alpha)
    return TestResult(
        feature_id, "wald", estimate=est, se=se, ci_low=est - z * se,
        ci_high=est + z * se, p=min(p, 1.0), statistic=stat,
    )


def _drop(X, index):
    return np.delete(np.asarray(X, dtype=float), index, axis=1)


def lrt_test(y, X, index=1, alpha=0.10, feature_id=None) -> TestResult:
    """Likelihood-ratio test of ``coefficient[index] = 0``.

    The p-value stays available when only the full model is separated,
    because its likelihood converges to a finite supremum; the estimate is
    then absent. If the reduced model is separated too, ``p`` is absent.
    """
    alpha = check_alpha(alpha)
    full = irls_fit(y, X)
    reduced = irls_fit(y, _drop(X, index))
    res = TestResult(feature_id, "lrt")
    if not full.separated:
        est, se = float(full.coefficients[index]), float(full.se[index])
        z = _z(alpha)
        res.estimate, res.se = est, se
        res.ci_low, res.ci_high = est - z * se, est + z * se
    else:
        res.note = "separation"
    if reduced.separated:
        res.note = "reduced model separated"
        return res
    dev = max(2.0 * (full.log_likelihood - reduced.log_likelihood), 0.0)
    res.statistic = dev
    res.p = float(stats.chi2.sf(dev, 1))
    return res


def _firth_objective(y, X, beta, off):
    eta = off + X @ beta
    info, p, w = _information(X, eta)
    sign, logdet = np.linalg.slogdet(info)
    ll = _loglik(y, eta)
    pen = 0.5 * logdet if sign > 0 else -math.inf
    return ll + pen, ll, info, p, w


def _firth_iterate(y, X, free, beta, off, max_iter, tol):
    """Modified-score Newton iterations over the coordinates in ``free``."""
    pl, ll, info, p, w = _firth_objective(y, X, beta, off)
    for it in range(1, max_iter + 1):
        cov = _inverse(info)
        # hat diagonal of W^1/2 X (X'WX)^-1 X' W^1/2
        h = np.einsum("ij,jk,ik->i", X, cov, X) * w
        score = X.T @ (y - p + h * (0.5 - p))
        step = np.zeros_like(beta)
        step[free] = _solve(info[np.ix_(free, free)], score[free])
        # cap wild first steps, then halve until the penalized likelihood rises
        big = np.max(np.abs(step))
        if big > 5.0:
            step *= 5.0 / big
        for _ in range(40):
            cand = beta + step
            pl_new, ll_new, info_new, p_new, w_new = _firth_objective(y, X, cand, off)
            if pl_new >= pl - 1e-12:
                break
            step = step / 2.0
        else:
            cand, pl_new, ll_new, info_new, p_new, w_new = beta, pl, ll, info, p, w
        beta, pl, ll, info, p, w = cand, pl_new, ll_new, info_new, p_new, w_new
        if np.max(np.abs(step)) < tol:
            return beta, pl, ll, info, it, True
    return beta, pl, ll, info, max_iter, False


def firth_fit(y, X, tol=IRLS_TOL, max_iter=FIRTH_MAX_ITER, fixed=None) -> GlmFit:
    """Firth bias-reduced logistic regression.

    Maximizes ``loglik(beta) + 0.5 * log det I(beta)``. Estimates are finite
    whenever ``X`` has full column rank, separation included.

    Parameters
    ----------
    fixed : dict, optional
        ``{index: value}`` coefficients held constant; the penalty still uses
        the information of the full design.

    Raises
    ------
    DesignError
        If ``X`` is rank deficient.
    ConvergenceError
        If the iterations fail to converge within ``max_iter``.
    """
    y, X = _check_inputs(y, X)
    k = X.shape[1]
    beta = np.zeros(k)
    fixed = fixed or {}
    for j, v in fixed.items():
        beta[j] = v
    free = np.array([j for j in range(k) if j not in fixed], dtype=int)
    off = np.zeros(len(y))
    beta, pl, ll, info, n_iter, ok = _firth_iterate(y, X, free, beta, off, max_iter, tol)
    if not ok:
        raise ConvergenceError(f"Firth iterations did not converge in {max_iter} steps")
    return GlmFit(
        coefficients=beta,
        cov_matrix=_inverse(info),
        log_likelihood=ll,
        converged=True,
        separated=False,
        n_iter=n_iter,
        penalized_log_likelihood=pl,
    )


def _profile_interval(y, X, index, fit, alpha):
    crit = float(stats.chi2.ppf(1.0 - alpha, 1))
    est = float(fit.coefficients[index])
    se = float(fit.se[index])

    def gap(value):
        sub = firth_fit(y, X, fixed={index: value})
        return 2.0 * (fit.penalized_log_likelihood - sub.penalized_log_likelihood) - crit

    def bound(direction):
        step = max(se, 0.1)
        far = est + direction * step
        for _ in range(60):
            if gap(far) > 0:
                return optimize.brentq(gap, min(est, far), max(est, far), xtol=1e-8)
            step *= 2.0
            far = est + direction * step
        return None

    return bound(-1.0), bound(1.0)


def firth_plrt(y, X, index=1, alpha=0.10, feature_id=None, profile_ci=False) -> TestResult:
    """Penalized likelihood-ratio test for ``coefficient[index] = 0``.

    The reduced fit holds the coefficient at zero while keeping the full
    design's penalty. The interval is Wald-type on the penalized fit unless
    ``profile_ci`` asks for the profile penalized-likelihood interval.
    """
    alpha = check_alpha(alpha)
    full = firth_fit(y, X)
    reduced = firth_fit(y, X, fixed={index: 0.0})
    dev = max(2.0 * (full.penalized_log_likelihood - reduced.penalized_log_likelihood), 0.0)
    est, se = float(full.coefficients[index]), float(full.se[index])
    if profile_ci:
        lo, hi = _profile_interval(y, X, index, full, alpha)
    else:
        z = _z(alpha)
        lo, hi = est - z * se, est + z * se
    return TestResult(
        feature_id, "firth", estimate=est, se=se, ci_low=lo, ci_high=hi,
        p=float(stats.chi2.sf(dev, 1)), statistic=dev,
    )


def bh_adjust(p) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values.

    ``q_(i) = min_{j >= i} p_(j) m / j`` over the sorted finite p-values,
    clipped to 1 and returned in the input order. NaN entries are treated as
    absent: they are left out of the family (``m`` counts only finite
    values) and stay NaN.

    Raises
    ------
    ValueError
        If a finite p-value lies outside [0, 1].
    """
    p = np.asarray(p, dtype=float)
    q = np.full(p.shape, np.nan)
    ok = ~np.isnan(p)
    vals = p[ok]
    if np.any((vals < 0.0) | (vals > 1.0)):
        raise ValueError("p-values must lie in [0, 1]")
    m = vals.size
    if m == 0:
        return q
    order = np.argsort(vals, kind="stable")
    scaled = vals[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    q[ok] = out
    return q


def feature_design(design) -> np.ndarray:
    """Intercept plus the per-sample ``[group, reads, covariates...]`` design."""
    design = np.asarray(design, dtype=float)
    return np.column_stack([np.ones(design.shape[0]), design])


def _test_one(y, X, method, alpha, fid):
    try:
        if method == "wald":
            return wald_test(irls_fit(y, X), 1, alpha, fid)
        if method == "lrt":
            return lrt_test(y, X, 1, alpha, fid)
        return firth_plrt(y, X, 1, alpha, fid)
    except (DesignError, ConvergenceError, np.linalg.LinAlgError) as exc:
        return TestResult(fid, method, note=f"{type(exc).__name__}: {exc}")


def run_feature_tests(design, Y, method="wald", alpha=0.10, feature_ids=None, n_jobs=1) -> list:
    """Test each column of ``Y`` and BH-adjust across the columns.

    ``design`` is the per-sample ``[group, reads, covariates...]`` matrix; an
    intercept is prepended. Features whose p-value is absent are excluded
    from the BH family and keep ``q = None``.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    alpha = check_alpha(alpha)
    X = feature_design(design)
    Y = np.asarray(Y, dtype=float)
    fids = list(feature_ids) if feature_ids is not None else list(range(Y.shape[1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if n_jobs == 1:
            results = [_test_one(Y[:, j], X, method, alpha, f) for j, f in enumerate(fids)]
        else:
            from joblib import Parallel, delayed

            results = Parallel(n_jobs=n_jobs)(
                delayed(_test_one)(Y[:, j], X, method, alpha, f) for j, f in enumerate(fids)
            )
    p = np.array([np.nan if r.p is None else r.p for r in results])
    q = bh_adjust(p)
    for r, qv in zip(results, q):
        if not np.isnan(qv):
            r.q = float(max(qv, r.p))
            r.significant = bool(r.q < alpha)
    return results


def run_frequentist_dpa(data, method="wald", alpha=0.10, n_jobs=1) -> list:
    """Test every feature of an :class:`~dipper.data.AnalysisInput`.

    Each feature is regressed on intercept, group, centered log reads and
    covariates; the group coefficient is tested with ``method`` and features
    with BH-adjusted ``q < alpha`` are significant. Results are in feature
    order and identical for any ``n_jobs``.
    """
    return run_feature_tests(
        data.design_matrix(), data.presence, method, alpha, data.feature_ids, n_jobs
    )
