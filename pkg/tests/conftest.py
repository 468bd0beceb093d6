import numpy as np
import pytest

from distreg import simulate as sim


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """A compact simulated world with one straight trajectory, shared by
    tests that only need plausible scan geometry."""
    world = sim.simulate_world(3, 120.0, 16)
    lidar = sim.LidarConfig(
        azimuth_steps=256,
        elevation_angles=tuple(np.linspace(-15.0, 5.0, 8)),
        max_range=80.0,
        range_noise_sigma=0.01,
    )
    trajectory = sim.line_trajectory((-35.0, 0.0), 0.0, 1.0, 71)
    seq = sim.simulate_sequence(world, trajectory, lidar, seed=1)
    return world, lidar, seq
