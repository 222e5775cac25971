import numpy as np
import pytest

from vprgraph.graph import build_graph
from vprgraph.simcore import (
    ExclusionVariant,
    FactorWeights,
    IntraKind,
    IntraSetSimilarities,
    ProblemSpec,
    SequenceConfig,
    SimilarityMatrix,
)

_ACCEPTANCE_LINES = []


def random_intra(rng, k, binary=False):
    if binary:
        a = (rng.random((k, k)) < 0.3).astype(float)
        a = np.maximum(a, a.T)
        np.fill_diagonal(a, 1.0)
        return IntraSetSimilarities(a, IntraKind.FROM_POSES)
    a = rng.random((k, k))
    a = np.triu(a, 1)
    a = a + a.T
    np.fill_diagonal(a, 1.0)
    return IntraSetSimilarities(a)


def random_graph(rng, M, N, variant=ExclusionVariant.PRODUCT, seq=True, db=True, q=True,
                 binary_db=False, L=5, velocities=(0.5, 1.0, 2.0), lo=0.0, hi=1.0):
    S = SimilarityMatrix(rng.uniform(lo, hi, (M, N)))
    weights = FactorWeights(*rng.uniform(0.5, 20.0, 5))
    spec = ProblemSpec(weights=weights, seq=SequenceConfig(L, velocities) if seq else None,
                       exclusion_variant=variant)
    return build_graph(S, random_intra(rng, M, binary_db) if db else None,
                       random_intra(rng, N) if q else None, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
