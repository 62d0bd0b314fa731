"""Synthetic attenuation phantoms for tests and demos."""

from __future__ import annotations

import numpy as np

from .volume import Volume, VolumeMask

# (centre mm, semi-axes mm, attenuation 1/mm); deliberately asymmetric
THREE_ELLIPSOIDS = (
    ((0.0, 0.0, 0.0), (44.0, 30.0, 36.0), 0.020),
    ((16.0, -10.0, 6.0), (14.0, 20.0, 11.0), 0.045),
    ((-20.0, 14.0, -12.0), (10.0, 8.0, 18.0), 0.070),
)


def ellipsoid_phantom(size: int = 128, spacing: float = 1.0, ellipsoids=THREE_ELLIPSOIDS) -> Volume:
    """Centred cubic volume of ``size³`` voxels; later ellipsoids overwrite earlier ones.

    The returned volume carries a mask of all voxels inside any ellipsoid.
    """
    half = (size - 1) / 2.0 * spacing
    origin = (-half, -half, -half)
    ax = np.arange(size) * spacing - half
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    data = np.zeros((size, size, size), dtype=np.float32)
    mask = np.zeros(data.shape, dtype=bool)
    for (cx, cy, cz), (a, b, c), mu in ellipsoids:
        inside = ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0
        data[inside] = mu
        mask |= inside
    return Volume(data, (spacing,) * 3, origin, unit="mu", mask=VolumeMask(mask))


def uniform_cube(size: int = 100, spacing: float = 1.0, mu: float = 0.02) -> Volume:
    half = (size - 1) / 2.0 * spacing
    data = np.full((size, size, size), mu, dtype=np.float32)
    return Volume(data, (spacing,) * 3, (-half, -half, -half), unit="mu",
                  mask=VolumeMask(np.ones(data.shape, dtype=bool)))
