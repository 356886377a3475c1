"""Closed-form noise predictors for Gaussian data models, used as sampler oracles."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..schedule import NoiseSchedule


class AnalyticGaussianDenoiser:
    """Exact E[eps | x_t] when x0 = mu0 + c * 1 + e with e ~ N(0, var0 I) and c ~ N(0, var_shared).

    With the default ``var_shared = 0`` voxels are independent and the estimate is
    elementwise. A positive shared variance couples all voxels of one patch (the last
    three axes) through a common offset, which gives samples patch-scale structure.
    """

    def __init__(self, mu0: float, var0: float, schedule: NoiseSchedule, var_shared: float = 0.0):
        if not var0 > 0:
            raise InvalidArgument(f"var0 must be positive, got {var0}")
        if var_shared < 0:
            raise InvalidArgument(f"var_shared must be non-negative, got {var_shared}")
        self.mu0 = float(mu0)
        self.var0 = float(var0)
        self.var_shared = float(var_shared)
        self.schedule = schedule

    def __call__(self, x_t, t: int, cond=None) -> np.ndarray:
        t = self.schedule.check_t(t)
        ab = self.schedule.alpha_bar[t]
        a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
        r = np.asarray(x_t, dtype=np.float64) - a * self.mu0
        s = ab * self.var0 + (1.0 - ab)
        if self.var_shared == 0.0:
            return b * r / s
        axes = tuple(range(r.ndim - 3, r.ndim)) if r.ndim >= 3 else tuple(range(r.ndim))
        n = int(np.prod([r.shape[ax] for ax in axes]))
        shared = ab * self.var_shared
        coef = shared * n / (s + n * shared)
        return b / s * (r - coef * r.mean(axis=axes, keepdims=True))

    def posterior_mean_x0(self, x_t, t: int) -> np.ndarray:
        t = self.schedule.check_t(t)
        ab = self.schedule.alpha_bar[t]
        eps = self(x_t, t)
        return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
