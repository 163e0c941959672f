import numpy as np
import pytest
from hypothesis import settings

from ganinfluence import models

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    X, _ = models.sample_distribution("normal", {"mean": 1.0, "std": 1.0}, 200, 1)
    return models.Dataset(X, models.latents(200, 1, 2))


@pytest.fixture(scope="session")
def small_val():
    return models.sample_distribution("normal", {"mean": 1.0, "std": 1.0}, 200, 3)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
