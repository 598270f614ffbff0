import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dipper.data import FeatureTable

settings.register_profile(
    "default", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_table(rng, n=20, k=6, covariates=None, sparsity=0.5):
    """Small random FeatureTable with balanced groups."""
    counts = rng.poisson(5.0, size=(n, k)).astype(float)
    counts[rng.random((n, k)) < sparsity] = 0.0
    group = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
    return FeatureTable(
        sample_ids=[f"s{i}" for i in range(n)],
        feature_ids=[f"f{j}" for j in range(k)],
        counts=counts,
        total_reads=rng.integers(1_000, 100_000, n).astype(float),
        group=group,
        covariates=covariates or {},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def small_table(rng):
    return random_table(rng, covariates={"age": rng.normal(50, 10, 20)})
