import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mrpath.model import MixtureParams, SnpRecord, SummaryDataset


@pytest.fixture
def two_cluster_params() -> MixtureParams:
    return MixtureParams([0.5, 0.5], [-0.5, 0.5], [0.01, 0.01], 0.0, 1.0)


@pytest.fixture
def tight_record() -> SnpRecord:
    return SnpRecord("rs1", 0.1, 0.01, 0.05, 0.01)


def random_params(rng: np.random.Generator, k: int | None = None) -> MixtureParams:
    """Well-separated random mixture parameters for property tests."""
    if k is None:
        k = int(rng.integers(1, 4))
    means = np.sort(rng.uniform(-2, 2, size=k))
    means += np.arange(k) * 0.05  # keep a minimum gap
    weights = rng.dirichlet(np.full(k, 5.0))
    weights = np.maximum(weights, 1e-3)
    weights = weights / weights.sum()
    variances = rng.uniform(0.005, 0.5, size=k)
    return MixtureParams(
        weights, means, variances, rng.uniform(-0.5, 0.5), rng.uniform(0.05, 2.0)
    )


def random_record(rng: np.random.Generator, snp_id: str = "rs1") -> SnpRecord:
    return SnpRecord(
        snp_id,
        rng.uniform(-1, 1),
        rng.uniform(0.005, 0.3),
        rng.uniform(-1, 1),
        rng.uniform(0.005, 0.3),
    )


def random_dataset(rng: np.random.Generator, p: int) -> SummaryDataset:
    return SummaryDataset([random_record(rng, f"rs{i}") for i in range(p)])
