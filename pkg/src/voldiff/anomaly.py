"""Reconstruction-based anomaly detection at a single fixed noise level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyROIError, InvalidArgument, ShapeError
from .sampler import NoiseFn, predict_x0, q_sample
from .schedule import NoiseSchedule

BACKGROUND = -1.0


@dataclass(frozen=True, eq=False)
class AnomalyResult:
    map: np.ndarray
    abs_map: np.ndarray
    mask: np.ndarray
    score: float
    reconstruction: np.ndarray


def default_t_fixed(T: int) -> int:
    """950 at T = 1000, scaled proportionally otherwise."""
    return max(1, min(int(T), int(round(0.95 * T))))


def binarize(abs_map, roi, threshold: float) -> np.ndarray:
    if threshold < 0:
        raise InvalidArgument(f"threshold must be >= 0, got {threshold}")
    return (np.asarray(abs_map) >= threshold) & np.asarray(roi, dtype=bool)


def normalize_map(abs_map, roi=None) -> np.ndarray:
    """Scale a map to [0, 1] by its maximum inside the ROI (used for the 0.5-threshold Dice)."""
    abs_map = np.asarray(abs_map, dtype=np.float64)
    sel = abs_map if roi is None else abs_map[np.asarray(roi, bool)]
    top = sel.max() if sel.size else 0.0
    return abs_map / top if top > 0 else np.zeros_like(abs_map)


def detect(d, x, roi, cond, t_fixed: int, threshold: float, s: NoiseSchedule,
           rng: np.random.Generator, score: str = "max", eps_fn: NoiseFn | None = None) -> AnomalyResult:
    """Mask to the ROI, noise to `t_fixed`, predict x0 in one shot and compare.

    The signed map is input minus reconstruction; mask and score use its absolute value
    inside the ROI only.
    """
    x = np.asarray(x, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != x.shape:
        raise ShapeError(f"roi shape {roi.shape} != volume shape {x.shape}")
    if not roi.any():
        raise EmptyROIError("region of interest is empty")
    t_fixed = s.check_t(t_fixed)
    if eps_fn is None:
        def eps_fn(v, t):
            return d(v, t, cond)

    x_masked = np.where(roi, x, BACKGROUND)
    x_t = q_sample(x_masked, t_fixed, rng.standard_normal(x.shape), s)
    recon = predict_x0(x_t, t_fixed, eps_fn(x_t, t_fixed), s)
    signed = np.where(roi, x_masked - recon, 0.0)
    abs_map = np.abs(signed)
    inside = abs_map[roi]
    if score == "max":
        value = float(inside.max())
    elif score == "mean":
        value = float(inside.mean())
    else:
        raise InvalidArgument(f"unknown score aggregation {score!r}")
    return AnomalyResult(signed, abs_map, binarize(abs_map, roi, threshold), value, recon)
