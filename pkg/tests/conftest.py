import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def _trained_moons_teacher():
    from cake.data import gen_two_moons
    from cake.models import mlp_new
    from cake.training import TrainConfig, train_classifier

    rng = np.random.default_rng(0)
    train = gen_two_moons(1000, 0.1, rng)
    test = gen_two_moons(1000, 0.1, rng, train.normalization)
    net = mlp_new(2, [32, 32], 2, np.random.default_rng(1))
    metrics = train_classifier(net, train, TrainConfig(epochs=30, batch_size=64), test)
    return net, train, test, metrics


@pytest.fixture
def moons_teacher(_trained_moons_teacher):
    """A small trained two-moons MLP with its real test split; each test gets its own copy."""
    net, train, test, metrics = _trained_moons_teacher
    return net.copy(), train, test, metrics
