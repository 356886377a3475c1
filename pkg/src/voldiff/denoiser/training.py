"""L1 noise-prediction training for the toy network and the control adapter."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..condition import ChannelLayout, make_condition
from ..errors import InvalidArgument, TrainingDivergedError
from ..schedule import NoiseSchedule
from ..voxgrid import Volume, apply_record, multi_level_sample
from .toynet import batch_tensors

log = logging.getLogger(__name__)


@dataclass
class TrainingCase:
    image: np.ndarray
    anatomy: np.ndarray
    region: object
    target: np.ndarray | None = None


def make_optimizer(model: torch.nn.Module, lr: float = 1e-4, betas=(0.9, 0.999)) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=betas)


def noise_loss(model, layout: ChannelLayout, batch, ts, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean |eps - eps_theta(x_t, t, cond)| for explicit timesteps and noise draws."""
    x0s = [np.asarray(x0, dtype=np.float64) for x0, _ in batch]
    conds = [c for _, c in batch]
    dtype = next(model.parameters()).dtype
    x_in, t, region, target = batch_tensors(x0s, ts, conds, layout, dtype)
    ab = torch.as_tensor(schedule.alpha_bar[np.asarray(ts)], dtype=dtype)[:, None, None, None]
    eps_t = torch.as_tensor(np.stack(eps), dtype=dtype)
    x_t = ab.sqrt() * x_in[:, 0] + (1.0 - ab).sqrt() * eps_t
    x_in = torch.cat([x_t[:, None], x_in[:, 1:]], dim=1)
    pred = model(x_in, t, region, target)
    return (eps_t - pred).abs().mean()


def train_step(model, optimizer, batch, schedule: NoiseSchedule, rng: np.random.Generator,
               layout: ChannelLayout, accumulate: int = 1) -> float:
    """One optimizer update on `batch` (a list of (x0 patch, ConditionBundle)).

    Timesteps are uniform on [1, T] and noise is standard normal, both drawn from `rng`.
    With ``accumulate > 1`` the batch is split into that many micro-batches whose
    gradients are summed before the update.
    """
    if not batch:
        raise InvalidArgument("empty training batch")
    optimizer.zero_grad(set_to_none=True)
    chunks = np.array_split(np.arange(len(batch)), max(1, min(int(accumulate), len(batch))))
    total = 0.0
    for idx in chunks:
        items = [batch[i] for i in idx]
        ts = rng.integers(1, schedule.T + 1, size=len(items))
        eps = [rng.standard_normal(np.shape(x0)) for x0, _ in items]
        loss = noise_loss(model, layout, items, ts, eps, schedule)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss.item()}")
        (loss * (len(items) / len(batch))).backward()
        total += loss.item() * len(items) / len(batch)
    optimizer.step()
    return total


def sample_patches(cases, patch, rng: np.random.Generator, layout: ChannelLayout, n: int):
    """Draw `n` multi-level training patches with matching condition bundles."""
    out = []
    for _ in range(n):
        case = cases[int(rng.integers(len(cases)))]
        vol = Volume(case.image, region=case.region)
        x0, record = multi_level_sample(vol, patch, rng)
        anatomy = apply_record(case.anatomy, record, patch, labels=True)
        target = None
        if case.target is not None:
            target = apply_record(case.target, record, patch, labels=True)
        cond = make_condition(case.region, anatomy, record, frequencies=layout.frequencies,
                              num_labels=layout.num_labels, target=target)
        out.append((x0.data, cond))
    return out


def fit(model, cases, schedule: NoiseSchedule, layout: ChannelLayout, *, steps: int, patch,
        batch_size: int = 2, lr: float = 1e-4, accumulate: int = 1, seed: int = 0,
        log_every: int = 100) -> list[float]:
    """Train for `steps` updates on patches drawn from `cases`; returns the loss history."""
    rng = np.random.default_rng(seed)
    optimizer = make_optimizer(model, lr)
    model.train()
    losses = []
    for step in range(int(steps)):
        batch = sample_patches(cases, patch, rng, layout, batch_size)
        losses.append(train_step(model, optimizer, batch, schedule, rng, layout, accumulate))
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    model.eval()
    return losses
