"""Mask-guided inpainting: known voxels are re-noised from the original at every step."""

from __future__ import annotations

import numpy as np

from .errors import InvalidMaskError, ShapeError
from .sampler import NoiseFn, check_steps, q_sample, skip_step
from .schedule import NoiseSchedule


def _binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise InvalidMaskError("mask values must be 0 or 1")
    return mask.astype(bool)


def repaint_combine(x_known, x_unknown, mask) -> np.ndarray:
    """(1 - mask) * x_known + mask * x_unknown for a binary mask (selected, not blended)."""
    m = _binary(mask)
    x_known, x_unknown = np.asarray(x_known), np.asarray(x_unknown)
    if not x_known.shape == x_unknown.shape == m.shape:
        raise ShapeError(f"shapes differ: {x_known.shape}, {x_unknown.shape}, {m.shape}")
    return np.where(m, x_unknown, x_known)


def inpaint_volume(d, cond, x_orig, mask, s: NoiseSchedule, rng: np.random.Generator,
                   steps=None, eps_fn: NoiseFn | None = None, clip_x0: float | None = None) -> np.ndarray:
    """Regenerate the voxels under `mask`; everything else is returned exactly as `x_orig`."""
    x_orig = np.asarray(x_orig, dtype=np.float64)
    m = _binary(mask)
    if m.shape != x_orig.shape:
        raise ShapeError(f"mask shape {m.shape} != volume shape {x_orig.shape}")
    if not m.any():
        return x_orig.copy()
    if eps_fn is None:
        def eps_fn(x, t):
            return d(x, t, cond)
    steps = check_steps(s, list(range(s.T, 0, -1)) if steps is None else list(steps))

    x = rng.standard_normal(x_orig.shape)
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        unknown = skip_step(x, t, t_next, eps_fn(x, t), s, rng, clip_x0)
        if t_next == 0:
            known = x_orig
        else:
            known = q_sample(x_orig, t_next, rng.standard_normal(x_orig.shape), s)
        x = repaint_combine(known, unknown, m)
    return x
