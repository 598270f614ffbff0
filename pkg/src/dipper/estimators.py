"""scikit-learn style estimators for differential prevalence.

Both estimators take ``X``, the per-sample design ``[group, log_reads_centered,
covariates...]`` (see :meth:`dipper.data.AnalysisInput.design_matrix`), and
``Y``, an N x K response (presence/absence, or standardized log abundances for
the Gaussian likelihood). The fitted group effects live in ``coef_``.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diagnostics
from ._validation import ConvergenceWarning, check_alpha, check_design, check_response
from .frequentist import TestResult, feature_design, run_feature_tests
from .model import LIKELIHOODS, PriorConfig, Posterior, init_params, transform_params
from .sampler import SamplerConfig, run_nuts

RHAT_THRESHOLD = 1.02


class DiPPER(BaseEstimator):
    """Hierarchical Bayesian differential prevalence with a shared skewed prior.

    Every feature gets its own logistic regression; the group effects share
    an asymmetric Laplace prior whose scale and skewness are learned from all
    features, which shrinks noisy estimates toward zero.

    Parameters
    ----------
    preset : {"default", "symm", "skewed", "wide", "narrow"}
        Named hyperprior configuration. Ignored when ``prior`` is given.
    prior : PriorConfig, optional
        Explicit hyperprior configuration.
    likelihood : {"bernoulli_logit", "gaussian"}
    alpha : float, default=0.10
        A feature is significant when its equal-tailed ``1 - alpha``
        credible interval excludes zero.
    chains, iterations, warmup, target_accept, max_tree_depth : sampler settings
    seed : int
    n_jobs : int
        Chains run in parallel when ``n_jobs != 1``; draws do not depend on it.
    parameterization : {"mixture", "centered", "noncentered"}
        Coordinates the sampler works in. All three target the same
        posterior; the mixture form avoids the prior's kink at zero and mixes
        best.

    Attributes
    ----------
    coef_ : ndarray of shape (K,)
        Posterior median group effect (log odds ratio).
    ci_ : ndarray of shape (K, 2)
        Equal-tailed credible interval at level ``1 - alpha``.
    significant_ : ndarray of bool, shape (K,)
    beta_draws_ : ndarray of shape (chains, draws, K)
    hyper_draws_ : dict
        ``tau0`` and ``nu0`` draws, each of shape (chains, draws).
    rhat_, ess_bulk_ : ndarray
        Diagnostics of the group effects followed by the hyperparameters.
    divergences_ : int
    converged_ : bool
        ``max(rhat_) < 1.02`` and no divergent transitions.
    """

    def __init__(self, preset="default", prior=None, likelihood="bernoulli_logit",
                 alpha=0.10, chains=4, iterations=3000, warmup=1000, target_accept=0.8,
                 max_tree_depth=10, seed=0, n_jobs=1, parameterization="mixture"):
        self.preset = preset
        self.prior = prior
        self.likelihood = likelihood
        self.alpha = alpha
        self.chains = chains
        self.iterations = iterations
        self.warmup = warmup
        self.target_accept = target_accept
        self.max_tree_depth = max_tree_depth
        self.seed = seed
        self.n_jobs = n_jobs
        self.parameterization = parameterization

    def _prior(self):
        return self.prior if self.prior is not None else PriorConfig.preset(self.preset)

    def _sampler_config(self):
        return SamplerConfig(
            chains=self.chains, iterations=self.iterations, warmup=self.warmup,
            target_accept=self.target_accept, max_tree_depth=self.max_tree_depth,
            seed=self.seed, n_jobs=self.n_jobs,
        )

    def fit(self, X, Y, feature_ids=None):
        """Sample the joint posterior of all features.

        Parameters
        ----------
        X : array of shape (N, 2 + M)
        Y : array of shape (N, K)
        feature_ids : sequence, optional
            Names used in summaries; defaults to ``0..K-1``.
        """
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        check_alpha(self.alpha)
        X = check_design(X)
        Y = check_response(Y, X.shape[0], binary=self.likelihood == "bernoulli_logit")
        config = self._sampler_config()
        post = Posterior(X, Y, self._prior(), self.likelihood, self.parameterization)
        layout = post.layout
        init = init_params(self.seed, layout, config.chains)
        draws = run_nuts(post, config, init, names=layout.names(), warn=False)

        self.n_features_in_ = X.shape[1]
        self.feature_ids_ = list(feature_ids) if feature_ids is not None else list(range(Y.shape[1]))
        if len(self.feature_ids_) != Y.shape[1]:
            raise ValueError("feature_ids length does not match Y")
        self.layout_ = layout
        self.draws_ = draws
        self.beta_draws_ = post.beta(draws.draws)
        tau0 = np.exp(draws.draws[..., 0])
        nu0 = expit(draws.draws[..., 1]) if layout.has_nu else np.full_like(tau0, 0.5)
        self.hyper_draws_ = {"tau0": tau0, "nu0": nu0}

        tracked = [self.beta_draws_, tau0[..., None]]
        if layout.has_nu:
            tracked.append(nu0[..., None])
        tracked = np.concatenate(tracked, axis=-1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", diagnostics.DegenerateDrawsWarning)
            if config.chains >= 2 and draws.n_draws >= 4:
                self.rhat_ = diagnostics.split_rhat(tracked)
            else:
                self.rhat_ = np.full(tracked.shape[-1], np.nan)
            self.ess_bulk_ = diagnostics.ess_bulk(tracked) if draws.n_draws >= 4 else np.full(tracked.shape[-1], np.nan)
        self.divergences_ = int(draws.divergence_count)
        finite = self.rhat_[np.isfinite(self.rhat_)]
        self.max_rhat_ = float(finite.max()) if finite.size else float("nan")
        self.converged_ = bool(
            self.divergences_ == 0 and not (self.max_rhat_ >= RHAT_THRESHOLD)
        )
        if not self.converged_:
            warnings.warn(
                f"sampler convergence check failed: max R-hat {self.max_rhat_:.4f}, "
                f"{self.divergences_} divergent transitions",
                ConvergenceWarning,
                stacklevel=2,
            )
        self._set_summary(self.alpha)
        return self

    def _set_summary(self, alpha):
        flat = self.beta_draws_.reshape(-1, self.beta_draws_.shape[-1])
        summ = diagnostics.summarize(flat, self.feature_ids_, alpha)
        self.coef_ = np.array([s.median for s in summ])
        self.ci_ = np.array([[s.ci_low, s.ci_high] for s in summ])
        self.significant_ = np.array([s.significant for s in summ])
        self.posterior_sd_ = flat.std(axis=0, ddof=1)

    def summarize(self, alpha=None) -> list:
        """Per-feature :class:`~dipper.diagnostics.FeatureSummary` at ``alpha``."""
        check_is_fitted(self, "beta_draws_")
        alpha = self.alpha if alpha is None else alpha
        flat = self.beta_draws_.reshape(-1, self.beta_draws_.shape[-1])
        return diagnostics.summarize(flat, self.feature_ids_, alpha)

    def diagnostics(self, include_runtime=True) -> dict:
        check_is_fitted(self, "beta_draws_")
        fin_ess = self.ess_bulk_[np.isfinite(self.ess_bulk_)]
        out = {
            "chains": int(self.draws_.n_chains),
            "draws_per_chain": int(self.draws_.n_draws),
            "rhat_max": self.max_rhat_ if np.isfinite(self.max_rhat_) else None,
            "ess_bulk_min": float(fin_ess.min()) if fin_ess.size else None,
            "divergences": self.divergences_,
            "converged": self.converged_,
            "rhat_threshold": RHAT_THRESHOLD,
            "step_size": [float(s) for s in self.draws_.step_size],
            "mean_accept": [float(a) for a in self.draws_.mean_accept],
            "parameterization": self.parameterization,
        }
        if include_runtime:
            out["runtime_s"] = float(self.draws_.runtime_s)
        return out

    def predict_proba(self, X, max_draws=1000):
        """Posterior mean presence probability, shape (N, K).

        Uses an evenly thinned subset of at most ``max_draws`` draws.
        """
        check_is_fitted(self, "draws_")
        if self.likelihood != "bernoulli_logit":
            raise ValueError("predict_proba needs the Bernoulli likelihood")
        X = check_design(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        A = feature_design(X)
        flat = self.draws_.flat()
        keep = np.linspace(0, flat.shape[0] - 1, min(max_draws, flat.shape[0])).astype(int)
        total = np.zeros((X.shape[0], self.layout_.n_features))
        for z in flat[keep]:
            coef = transform_params(z, self.layout_).coefficient_matrix()
            total += expit(A @ coef.T)
        return total / len(keep)

    def results(self, alpha=None) -> list:
        """Rows in the shared results schema (no p- or q-values)."""
        out = []
        for s, sd in zip(self.summarize(alpha), self.posterior_sd_):
            out.append(TestResult(
                s.feature_id, "dipper" if self.likelihood == "bernoulli_logit" else "dipper_gaussian",
                estimate=s.median, se=float(sd), ci_low=s.ci_low, ci_high=s.ci_high,
                significant=s.significant,
            ))
        return out


class FrequentistDPA(BaseEstimator):
    """Per-feature logistic regression tests with Benjamini-Hochberg control.

    Parameters
    ----------
    method : {"wald", "lrt", "firth"}
    alpha : float, default=0.10
        Significance threshold on BH-adjusted q-values; also sets the
        ``1 - alpha`` confidence interval level.

    Attributes
    ----------
    results_ : list of TestResult
    coef_ : ndarray of shape (K,)
        Group-effect estimates, NaN where absent (separation under Wald).
    pvalues_, qvalues_ : ndarray of shape (K,)
        NaN where absent.
    significant_ : ndarray of bool
    """

    def __init__(self, method="wald", alpha=0.10):
        self.method = method
        self.alpha = alpha

    def fit(self, X, Y, feature_ids=None):
        X = check_design(X)
        Y = check_response(Y, X.shape[0])
        results = run_feature_tests(X, Y, self.method, self.alpha, feature_ids)
        self.n_features_in_ = X.shape[1]
        self.feature_ids_ = [r.feature_id for r in results]
        self.results_ = results
        self.coef_ = _field(results, "estimate")
        self.pvalues_ = _field(results, "p")
        self.qvalues_ = _field(results, "q")
        self.significant_ = np.array([r.significant for r in results])
        return self


def _field(results, name):
    return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in results])
