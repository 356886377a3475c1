"""Sliding-window whole-volume processing with mean-fused noise estimates.

At every timestep each window predicts noise on its patch; per-voxel estimates are
averaged over the covering windows and a single global update is applied.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from . import inverse, sampler
from .errors import InvalidArgument
from .schedule import NoiseSchedule

# cond_factory(origin, size) -> ConditionBundle for that window
CondFactory = Callable[[tuple, tuple], object]


def axis_origins(extent: int, window: int, stride: int) -> list[int]:
    if window > extent:
        raise InvalidArgument(f"window {window} larger than extent {extent}")
    if not 1 <= stride <= window:
        raise InvalidArgument(f"stride must satisfy 1 <= stride <= window, got {stride}")
    origins = list(range(0, extent - window + 1, stride))
    if origins[-1] != extent - window:
        origins.append(extent - window)
    return origins


@dataclass(frozen=True, eq=False)
class WindowPlan:
    volume_shape: tuple
    window: tuple
    stride: tuple
    origins: tuple
    coverage: np.ndarray

    def slices(self, origin) -> tuple:
        return tuple(slice(o, o + w) for o, w in zip(origin, self.window))


def plan_windows(volume_shape, window, stride=None) -> WindowPlan:
    volume_shape = tuple(int(n) for n in volume_shape)
    window = tuple(int(w) for w in np.broadcast_to(window, (3,)))
    stride = tuple(max(1, w // 2) for w in window) if stride is None else tuple(
        int(s) for s in np.broadcast_to(stride, (3,)))
    per_axis = [axis_origins(n, w, s) for n, w, s in zip(volume_shape, window, stride)]
    origins = tuple(product(*per_axis))
    coverage = np.zeros(volume_shape, dtype=np.int64)
    for o in origins:
        coverage[tuple(slice(a, a + w) for a, w in zip(o, window))] += 1
    return WindowPlan(volume_shape, window, stride, origins, coverage)


def fused_noise_estimate(d, x_t, t: int, plan: WindowPlan, cond_factory: CondFactory | None,
                         executor: Executor | None = None) -> np.ndarray:
    """Mean of per-window noise predictions; windows may run on `executor`, merged in plan order."""
    x_t = np.asarray(x_t, dtype=np.float64)

    def one(origin):
        cond = None if cond_factory is None else cond_factory(origin, plan.window)
        return d(x_t[plan.slices(origin)], t, cond)

    if executor is None:
        estimates = map(one, plan.origins)
    else:
        estimates = executor.map(one, plan.origins)
    total = None
    for origin, est in zip(plan.origins, estimates):
        sl = plan.slices(origin)
        if total is None:
            total = np.zeros_like(x_t)
            total[sl] = est
        else:
            total[sl] += est
    if len(plan.origins) == 1 and plan.window == tuple(x_t.shape):
        return total
    return total / plan.coverage


def fused_noise_fn(d, plan, cond_factory, executor):
    def eps_fn(x, t):
        return fused_noise_estimate(d, x, t, plan, cond_factory, executor)
    return eps_fn


def tiled_generate(d, cond_factory: CondFactory | None, volume_shape, s: NoiseSchedule,
                   rng: np.random.Generator, plan: WindowPlan | None = None, steps=None,
                   executor: Executor | None = None, clip_x0: float | None = None) -> np.ndarray:
    plan = plan or plan_windows(volume_shape, volume_shape)
    return sampler.generate(d, None, volume_shape, s, rng, steps=steps,
                            eps_fn=fused_noise_fn(d, plan, cond_factory, executor), clip_x0=clip_x0)


def tiled_restore(d, cond_factory: CondFactory | None, y0, ops: inverse.DegradationOps,
                  s: NoiseSchedule, plan: WindowPlan | None = None, nfe=None,
                  zeta: float = inverse.DEFAULT_ZETA, rng=None,
                  executor: Executor | None = None) -> np.ndarray:
    shape = ops.hr_shape(np.shape(y0))
    plan = plan or plan_windows(shape, shape)
    return inverse.restore(d, None, y0, ops, s, nfe=nfe, zeta=zeta, rng=rng,
                           eps_fn=fused_noise_fn(d, plan, cond_factory, executor))


def naive_stitch_generate(d, cond_factory: CondFactory | None, volume_shape, s: NoiseSchedule,
                          rng: np.random.Generator, plan: WindowPlan, steps=None,
                          clip_x0: float | None = None) -> np.ndarray:
    """Baseline: sample every window independently and paste them in plan order."""
    out = np.zeros(tuple(volume_shape))
    for origin in plan.origins:
        cond = None if cond_factory is None else cond_factory(origin, plan.window)
        out[plan.slices(origin)] = sampler.generate(d, cond, plan.window, s, rng, steps=steps, clip_x0=clip_x0)
    return out


def seam_ratio(x: np.ndarray, plan: WindowPlan) -> float:
    """Mean |forward difference| across window-boundary planes over the mean elsewhere.

    A boundary plane sits between voxels i-1 and i wherever some window starts at i > 0
    or ends at i < extent, along any axis.
    """
    x = np.asarray(x, dtype=np.float64)
    on, off = [], []
    for axis in range(3):
        n = x.shape[axis]
        cuts = set()
        for o in {org[axis] for org in plan.origins}:
            if o > 0:
                cuts.add(o)
            if o + plan.window[axis] < n:
                cuts.add(o + plan.window[axis])
        diff = np.abs(np.diff(x, axis=axis))
        is_cut = np.zeros(n - 1, dtype=bool)
        for c in cuts:
            is_cut[c - 1] = True
        moved = np.moveaxis(diff, axis, 0)
        on.append(moved[is_cut].ravel())
        off.append(moved[~is_cut].ravel())
    on, off = np.concatenate(on), np.concatenate(off)
    if on.size == 0 or off.size == 0:
        return 1.0
    return float(on.mean() / off.mean())
