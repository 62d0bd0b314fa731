from __future__ import annotations

import numpy as np
import pytest

from rayreg.geometry import CameraModel, PoseSE3
from rayreg.phantom import ellipsoid_phantom


@pytest.fixture(scope="session")
def small_phantom():
    """64³ voxels at 2 mm: same anatomy as the 128³ phantom, an eighth of the voxels."""
    return ellipsoid_phantom(64, 2.0)


@pytest.fixture(scope="session")
def phantom128():
    return ellipsoid_phantom(128, 1.0)


@pytest.fixture
def camera():
    return CameraModel.centered(1000.0, 128, pixel_mm=2.0)


@pytest.fixture
def center_pose():
    return PoseSE3(np.eye(3), np.array([0.0, 0.0, 600.0]))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
