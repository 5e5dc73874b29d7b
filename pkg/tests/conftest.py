import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossview.geometry import CameraPose

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("suite")


def rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@pytest.fixture
def make_pose():
    def _make(azimuth=0.0, elevation=0.0, radius=3.0, focal=24.0, height=16, width=16):
        return CameraPose(
            azimuth=azimuth,
            elevation=elevation,
            radius=radius,
            focal=focal,
            height=height,
            width=width,
        )

    return _make


def ring_poses(n, elevation=15.0, radius=3.0, focal=24.0, size=16):
    return [
        CameraPose(
            azimuth=360.0 * i / n,
            elevation=elevation,
            radius=radius,
            focal=focal,
            height=size,
            width=size,
        )
        for i in range(n)
    ]
