import numpy as np
import pytest

from adaclust.cluster1d import MergeScorer
from adaclust.cluster2d import DirectionalScorers
from adaclust.tensor import Tensor


def random_scorer(rng: np.random.Generator, d: int, scale: float = 1.0) -> MergeScorer:
    return MergeScorer(
        Tensor(rng.normal(scale=scale, size=(2 * d, 1)), requires_grad=True),
        Tensor(rng.normal(scale=scale, size=1), requires_grad=True),
    )


def random_scorers(rng: np.random.Generator, d: int, scale: float = 1.0) -> DirectionalScorers:
    return DirectionalScorers(random_scorer(rng, d, scale), random_scorer(rng, d, scale))


def fixed_scorer(d: int, bias: float) -> MergeScorer:
    return MergeScorer(Tensor(np.zeros((2 * d, 1))), Tensor([bias]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
