import numpy as np
import pytest

from racecraft.memory import LapMemory
from racecraft.simulation import PidController, run_laps
from racecraft.track import build_track
from racecraft.vehicle import VehicleParams


@pytest.fixture(scope="session")
def vehicle():
    return VehicleParams()


@pytest.fixture(scope="session")
def m_track():
    return build_track("m_shape", 51.0, 2.0)


@pytest.fixture(scope="session")
def ellipse_track():
    return build_track("ellipse", 51.0, 2.0)


@pytest.fixture(scope="session")
def warmup_memory(m_track, vehicle):
    """Two tracking-controller laps on the M-shape track (shared, read-only)."""
    memory = LapMemory(m_track.total_length)
    pid = PidController(v_target=0.8, vehicle=vehicle)
    run_laps(m_track, pid, memory, 2, vehicle)
    return memory


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def random_states(rng, n):
    """Plausible on-track states for randomized checks."""
    out = np.empty((n, 6))
    out[:, 0] = rng.uniform(0.2, 1.5, n)
    out[:, 1] = rng.uniform(-0.3, 0.3, n)
    out[:, 2] = rng.uniform(-1.0, 1.0, n)
    out[:, 3] = rng.uniform(-0.5, 0.5, n)
    out[:, 4] = rng.uniform(0.0, 51.0, n)
    out[:, 5] = rng.uniform(-0.9, 0.9, n)
    return out
