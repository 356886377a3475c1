"""Global coordinate channels and their Fourier features."""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, InvalidArgument
from .voxgrid import CropRecord

DEFAULT_FREQUENCIES = 6


def _axis_coords(n_volume: int, origin: int, extent: int, n_patch: int) -> np.ndarray:
    if n_patch == 1:
        src = np.array([origin + (extent - 1) / 2.0])
    else:
        src = origin + np.arange(n_patch) * ((extent - 1) / (n_patch - 1))
    if n_volume == 1:
        return np.zeros(n_patch)
    return 2.0 * src / (n_volume - 1) - 1.0


def coord_grid_for_window(volume_shape, record: CropRecord, patch) -> np.ndarray:
    """Return a (3, P, P, P) array of normalized (x, y, z) positions in the whole volume.

    Patch voxels are spread linearly over the record extent, so crops map to the
    exact source voxel positions and resized inputs interpolate across the extent.
    """
    volume_shape = tuple(int(n) for n in volume_shape)
    patch = tuple(int(p) for p in patch)
    for n, o, e in zip(volume_shape, record.origin, record.extent):
        if o < 0 or e < 1 or o + e > n:
            raise BoundsError(f"record {record} outside volume {volume_shape}")
    z, y, x = (
        _axis_coords(n, o, e, p)
        for n, o, e, p in zip(volume_shape, record.origin, record.extent, patch)
    )
    pz, py, px = np.meshgrid(z, y, x, indexing="ij")
    return np.stack([px, py, pz])


def fourier_encode(grid: np.ndarray, L: int = DEFAULT_FREQUENCIES) -> np.ndarray:
    """(sin 2^k pi p, cos 2^k pi p) for k < L, grouped per coordinate channel (x, y, z)."""
    if int(L) < 1:
        raise InvalidArgument(f"maximum frequency L must be >= 1, got {L}")
    feats = []
    for p in grid:
        for k in range(int(L)):
            arg = (2.0 ** k) * np.pi * p
            feats.append(np.sin(arg))
            feats.append(np.cos(arg))
    return np.stack(feats)
