"""Forward noising, x0 prediction and ancestral reverse sampling."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgument, ShapeError
from .schedule import NoiseSchedule

# eps_fn(x_t, t) -> predicted noise with the shape of x_t
NoiseFn = Callable[[np.ndarray, int], np.ndarray]


def q_sample(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    t = s.check_t(t, allow_zero=True)
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = s.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_hat, s: NoiseSchedule) -> np.ndarray:
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    if ab <= 0.0:
        raise InvalidArgument(f"alpha_bar[{t}] is zero; x0 is not recoverable")
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    return float((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t])


def ancestral_step(x_t, t: int, eps_hat, s: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One reverse step t -> t-1 with mean from eps_hat and variance beta_tilde; no noise at t = 1."""
    t = s.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = (x_t - s.beta[t] / np.sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / np.sqrt(s.alpha[t])
    if t == 1:
        return mean
    return mean + np.sqrt(posterior_variance(s, t)) * rng.standard_normal(x_t.shape)


def skip_step(x_t, t: int, t_next: int, eps_hat, s: NoiseSchedule, rng: np.random.Generator,
              clip_x0: float | None = None) -> np.ndarray:
    """Reverse jump t -> t_next with coefficients from the two endpoint alpha_bars (eta = 1).

    Adjacent steps without clipping are exactly `ancestral_step`. With `clip_x0` the x0
    estimate is clamped to [-clip_x0, clip_x0] and the noise estimate re-derived from it
    (for adjacent steps this is the ancestral update with a clamped posterior mean).
    """
    t, t_next = s.check_t(t), s.check_t(t_next, allow_zero=True)
    if t_next >= t:
        raise InvalidArgument(f"skip must go backwards, got {t} -> {t_next}")
    if t_next == t - 1 and clip_x0 is None:
        return ancestral_step(x_t, t, eps_hat, s, rng)
    ab, ab_next = s.alpha_bar[t], s.alpha_bar[t_next]
    x0 = predict_x0(x_t, t, eps_hat, s)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        eps_hat = (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    var = (1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next)
    mean = np.sqrt(ab_next) * x0 + np.sqrt(max(1.0 - ab_next - var, 0.0)) * eps_hat
    if t_next == 0:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(np.shape(x_t))


def check_steps(s: NoiseSchedule, steps) -> list[int]:
    steps = [s.check_t(t) for t in steps]
    if not steps or steps[-1] != 1 or any(a <= b for a, b in zip(steps, steps[1:])):
        raise InvalidArgument("steps must be strictly decreasing and end at 1")
    return steps


def run_reverse(eps_fn: NoiseFn, x: np.ndarray, steps, s: NoiseSchedule, rng, callback=None,
                clip_x0: float | None = None) -> np.ndarray:
    """Walk x down `steps`, using eps_fn for the noise estimate at each visited timestep."""
    steps = check_steps(s, steps)
    for i, t in enumerate(steps):
        eps_hat = eps_fn(x, t)
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        x = skip_step(x, t, t_next, eps_hat, s, rng, clip_x0)
        if callback is not None:
            x = callback(x, t_next)
    return x


def generate(d, cond, shape, s: NoiseSchedule, rng: np.random.Generator, steps=None,
             eps_fn: NoiseFn | None = None, clip_x0: float | None = None) -> np.ndarray:
    """Sample from noise at steps[0] (default T) down to a clean patch.

    `clip_x0` (e.g. 1.0 for normalized intensities) stabilises learned denoisers whose
    x0 estimates blow up at high t; leave it None for exact analytic sampling.
    """
    steps = list(range(s.T, 0, -1)) if steps is None else list(steps)
    if eps_fn is None:
        def eps_fn(x, t):
            return d(x, t, cond)
    x = rng.standard_normal(tuple(shape))
    return run_reverse(eps_fn, x, steps, s, rng, clip_x0=clip_x0)
