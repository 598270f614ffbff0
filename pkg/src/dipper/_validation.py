"""Exception types and input checks shared by the estimators and pipelines."""

import numpy as np
from sklearn.utils.validation import check_array


class DataError(ValueError):
    """Malformed or unusable input data."""


class SchemaError(DataError):
    """Required columns are missing or a file does not match its schema."""


class ValidationError(DataError):
    """Input values violate a documented invariant."""


class DesignError(ValueError):
    """A design matrix is rank deficient."""


class ConvergenceError(RuntimeError):
    pass


class DegenerateDrawsWarning(UserWarning):
    """A diagnostic was undefined because the draws are constant."""


class ConvergenceWarning(UserWarning):
    """R-hat or divergence checks failed; results are still reported."""


def check_design(X, n_samples=None):
    """Validate a per-sample design ``[group, log_reads_centered, covariates...]``."""
    X = check_array(X, dtype=np.float64, ensure_min_features=2)
    if n_samples is not None and X.shape[0] != n_samples:
        raise ValueError(f"design has {X.shape[0]} rows, expected {n_samples}")
    if not np.all(np.isin(X[:, 0], (0.0, 1.0))):
        raise ValidationError("first design column (group) must be 0/1")
    return X


def check_response(Y, n_samples, binary=True):
    Y = check_array(Y, dtype=np.float64, ensure_2d=False)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n_samples:
        raise ValueError(f"response has {Y.shape[0]} rows, expected {n_samples}")
    if binary and not np.all(np.isin(Y, (0.0, 1.0))):
        raise ValidationError("presence matrix must contain only 0 and 1")
    return Y


def check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    return float(alpha)


class CapabilityError(RuntimeError):
    """The stored results cannot answer the request (e.g. draws were not kept)."""
