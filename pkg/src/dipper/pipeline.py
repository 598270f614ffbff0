"""One-call analysis of a table with any supported method."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._validation import ConvergenceWarning, ValidationError, check_alpha
from .data import FeatureTable, gaussian_response, prepare_input
from .estimators import DiPPER
from .frequentist import run_frequentist_dpa
from .model import PRESETS

BAYESIAN_METHODS = ("dipper", "dipper_gaussian")
FREQUENTIST_METHODS = ("wald", "lrt", "firth")
ALL_METHODS = BAYESIAN_METHODS + FREQUENTIST_METHODS


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for an analysis run.

    ``preset`` applies only to the Bayesian methods; frequentist runs
    accept only ``"default"``.
    """

    input: tuple = ()
    method: str = "dipper"
    preset: str = "default"
    alpha: float = 0.10
    seed: int = 0
    chains: int = 4
    iterations: int = 3000
    warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    group_col: str = "group"
    reads_col: str = "total_reads"
    covariates: tuple = ()
    out: str = "results"
    n_jobs: int = 1
    min_present: int = 4
    n_splits: int = 10
    null_group: int = 0
    alphas: tuple = (0.01, 0.05, 0.10, 0.20)
    write_draws: bool = True
    record_timing: bool = False

    def __post_init__(self):
        for name in ("input", "covariates", "alphas"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple([v] if isinstance(v, str) else v))
        if self.method not in ALL_METHODS:
            raise ValidationError(f"method must be one of {ALL_METHODS}, got {self.method!r}")
        if self.preset not in PRESETS:
            raise ValidationError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.method in FREQUENTIST_METHODS and self.preset != "default":
            raise ValidationError("prior presets apply only to the Bayesian methods")
        try:
            check_alpha(self.alpha)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        if self.chains < 1 or not 0 <= self.warmup < self.iterations:
            raise ValidationError("need chains >= 1 and 0 <= warmup < iterations")
        if self.n_splits < 1:
            raise ValidationError("n_splits must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AnalysisOutput:
    results: list
    diagnostics: dict
    feature_ids: list
    beta_draws: np.ndarray | None = None
    converged: bool = True
    extra: dict = field(default_factory=dict)


def analyze(table: FeatureTable, config: RunConfig, seed=None) -> AnalysisOutput:
    """Filter features, build the design and run ``config.method``.

    Bayesian runs report convergence through ``converged`` and the
    diagnostics rather than raising; the warning is suppressed here so
    callers decide how to surface it.
    """
    seed = config.seed if seed is None else seed
    data = prepare_input(table, config.min_present)
    diag = {"n_samples": data.n_samples, "n_features_tested": data.n_features,
            "n_features_input": table.n_features, "method": config.method}
    if config.method in FREQUENTIST_METHODS:
        results = run_frequentist_dpa(data, config.method, config.alpha, config.n_jobs)
        diag["n_absent"] = sum(r.p is None for r in results)
        return AnalysisOutput(results, diag, list(data.feature_ids))

    gaussian = config.method == "dipper_gaussian"
    Y = gaussian_response(table, data.feature_ids) if gaussian else data.presence
    est = DiPPER(
        preset=config.preset,
        likelihood="gaussian" if gaussian else "bernoulli_logit",
        alpha=config.alpha, chains=config.chains, iterations=config.iterations,
        warmup=config.warmup, target_accept=config.target_accept,
        max_tree_depth=config.max_tree_depth, seed=seed, n_jobs=config.n_jobs,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        est.fit(data.design_matrix(), Y, feature_ids=data.feature_ids)
    diag.update(est.diagnostics(include_runtime=config.record_timing))
    diag["preset"] = config.preset
    return AnalysisOutput(
        est.results(), diag, list(data.feature_ids), est.beta_draws_, est.converged_,
        extra={"hyper": {k: float(np.median(v)) for k, v in est.hyper_draws_.items()}},
    )
