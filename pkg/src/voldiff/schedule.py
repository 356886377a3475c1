"""Noise schedule tables and timestep arithmetic.

Timesteps are 1-based: index 0 of every table holds the noise-free convention
(alpha_bar = 1, sigma_bar = 0), so ``alpha_bar[t]`` is the cumulative product at step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

COSINE_OFFSET = 0.008
BETA_MAX = 0.999
BETA_MIN = 1e-8


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_bar: np.ndarray
    kind: str = "cosine"
    offset: float = COSINE_OFFSET

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise InvalidArgument(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T, "offset": self.offset}

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        if obj.get("kind", "cosine") != "cosine":
            raise InvalidArgument(f"unsupported schedule kind {obj.get('kind')!r}")
        return cosine_schedule(int(obj["T"]), float(obj.get("offset", COSINE_OFFSET)))


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if int(T) < 1:
        raise InvalidArgument(f"step count must be >= 1, got {T}")
    T = int(T)
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    ab_raw = f / f[0]
    beta = np.clip(1.0 - ab_raw[1:] / ab_raw[:-1], BETA_MIN, BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    sigma_bar = np.sqrt((1.0 - alpha_bar) / alpha_bar)
    # pad per-step tables so index t is step t
    beta = np.concatenate([[0.0], beta])
    alpha = np.concatenate([[1.0], alpha])
    for arr in (beta, alpha, alpha_bar, sigma_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma_bar, "cosine", float(s))


def t_start_for_sigma(s: NoiseSchedule, sigma_n: float) -> int:
    """Smallest t with sigma_bar[t] >= sigma_n, clamped to T."""
    if not sigma_n > 0:
        raise InvalidArgument(f"sigma_n must be positive, got {sigma_n}")
    idx = int(np.searchsorted(s.sigma_bar[1:], sigma_n, side="left")) + 1
    return min(idx, s.T)


def skip_subsequence(s: NoiseSchedule, nfe: int, t_start: int) -> list[int]:
    """`nfe` strictly decreasing timesteps from t_start down to 1, uniformly spaced."""
    nfe, t_start = int(nfe), s.check_t(t_start)
    if nfe < 1 or nfe > t_start:
        raise InvalidArgument(f"need 1 <= nfe <= t_start, got nfe={nfe}, t_start={t_start}")
    if nfe == 1:
        return [t_start]
    # rounding a uniform grid keeps neighbouring gaps within 1 of each other
    grid = 1.0 + (t_start - 1) * np.arange(nfe - 1, -1, -1, dtype=np.float64) / (nfe - 1)
    return [int(v) for v in np.floor(grid + 0.5)]
