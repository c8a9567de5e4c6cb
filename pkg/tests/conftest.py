import numpy as np
import pytest

from hybrid_contact import sim
from hybrid_contact.kinematics import demo_biped


@pytest.fixture(scope="session")
def robot():
    return demo_biped()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def noise_free_walk():
    """10 s noise-free walk shared by solver and dataset tests."""
    cfg = sim.ScenarioConfig(duration=10.0, seed=0).noise_free()
    truth, data = sim.generate(cfg)
    return cfg, truth, data


@pytest.fixture(scope="session")
def noisy_walk():
    cfg = sim.ScenarioConfig(duration=10.0, seed=5)
    truth, data = sim.generate(cfg)
    return cfg, truth, data


def random_pose(rng, scale=1.0):
    from hybrid_contact import manifold as mf
    xi = rng.normal(size=6) * scale
    xi[:3] *= min(1.0, 2.5 / max(np.linalg.norm(xi[:3]), 1e-12))
    return mf.se3_exp(xi)
