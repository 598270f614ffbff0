"""Differential prevalence analysis with hierarchical Bayesian shrinkage.

The main entry points are the :class:`DiPPER` and :class:`FrequentistDPA`
estimators, :func:`ingest_table` / :func:`prepare_input` for data, and the
``dipper`` command-line tool (:mod:`dipper.cli`).
"""

from ._validation import (
    CapabilityError,
    ConvergenceError,
    ConvergenceWarning,
    DataError,
    DegenerateDrawsWarning,
    DesignError,
    SchemaError,
    ValidationError,
)
from .data import (
    AnalysisInput,
    FeatureTable,
    NullSplitSpec,
    build_design,
    derive_presence,
    filter_features,
    ingest_table,
    make_null_splits,
    prepare_input,
    write_table,
)
from .estimators import DiPPER, FrequentistDPA
from .model import PRESETS, PriorConfig, al_logpdf, log_posterior_and_grad
from .sampler import SamplerConfig, run_nuts

__version__ = "0.1.0"

__all__ = [
    "AnalysisInput",
    "CapabilityError",
    "ConvergenceError",
    "ConvergenceWarning",
    "DataError",
    "DegenerateDrawsWarning",
    "DesignError",
    "DiPPER",
    "FeatureTable",
    "FrequentistDPA",
    "NullSplitSpec",
    "PRESETS",
    "PriorConfig",
    "SamplerConfig",
    "SchemaError",
    "ValidationError",
    "al_logpdf",
    "build_design",
    "derive_presence",
    "filter_features",
    "ingest_table",
    "log_posterior_and_grad",
    "make_null_splits",
    "prepare_input",
    "run_nuts",
    "write_table",
]
