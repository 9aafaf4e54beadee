"""Shared fixtures: geometry, a quiet sim config, and small event factories."""

import math

import numpy as np
import pytest

from vibroloc.geometry import ContactPoint, CylinderSpec, default_layout
from vibroloc.simulate import (SimConfig, StrikeSpec, make_rod_profiles,
                               strike_direction, synth_event,
                               synth_noise_reference)


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture(scope="session")
def cyl():
    return CylinderSpec()


@pytest.fixture(scope="session")
def quiet_cfg():
    """Simulator config with every additive noise source silenced."""
    return SimConfig(motor_level=0.0, ambient_level=0.0, leaf_level=0.0)


@pytest.fixture(scope="session")
def rods():
    return make_rod_profiles(3, [5, 1], (90.0, 580.0), "rodT")


@pytest.fixture(scope="session")
def event_factory(layout, cyl, rods):
    """Callable building one synthetic event from (z, theta, seed, cfg)."""

    def make(z, theta, seed, cfg, speed=2.0, tilt=0.1, rod_idx=0,
             with_proprio=True):
        direction = strike_direction(theta, 0.0, tilt)
        strike = StrikeSpec(ContactPoint(z, theta), speed, direction,
                            rods[rod_idx])
        return synth_event(strike, layout, cyl, cfg, seed,
                           with_proprio=with_proprio)

    return make


@pytest.fixture(scope="session")
def noise_reference():
    return synth_noise_reference(SimConfig(), [42, 0])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def assert_angle_close(a, b, atol=1e-9):
    d = math.remainder(a - b, 2.0 * math.pi)
    assert abs(d) < atol, f"angles {a} and {b} differ by {d}"
