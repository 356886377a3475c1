"""Small conditional 3D U-Net and its numpy-facing noise-prediction wrapper."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..condition import ChannelLayout, ConditionBundle, assemble_condition_channels
from ..errors import InvalidArgument, ShapeError


@dataclass(frozen=True)
class ToyNetConfig:
    base_channels: int = 8
    time_dim: int = 32
    num_regions: int = 3
    # "eps": the head is the noise estimate; "v": the head estimates
    # v = sqrt(ab) * eps - sqrt(1 - ab) * x0 and is converted to eps in forward()
    prediction: str = "eps"

    def to_json(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(t.dtype if t.is_floating_point() else torch.get_default_dtype())


def _groups(channels: int) -> int:
    return math.gcd(4, channels)


class ConvBlock(nn.Module):
    """conv -> GN -> SiLU, add time embedding, conv -> GN -> SiLU."""

    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.time = nn.Linear(time_dim, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x, temb, extra=None):
        h = self.conv1(x)
        if extra is not None:
            h = h + extra
        h = F.silu(self.norm1(h)) + self.time(temb)[:, :, None, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class ResBlock(nn.Module):
    # stands in for the attention stage at the bottleneck
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.time = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.time(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """Time/region embedding plus the two encoder levels and the bottleneck."""

    def __init__(self, in_channels: int, cfg: ToyNetConfig):
        super().__init__()
        c = cfg.base_channels
        self.time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.region = nn.Embedding(cfg.num_regions, cfg.time_dim)
        self.enc1 = ConvBlock(in_channels, c, cfg.time_dim)
        self.enc2 = ConvBlock(c, 2 * c, cfg.time_dim)
        self.mid = ResBlock(2 * c, cfg.time_dim)

    def embed(self, t, region):
        return self.time_mlp(timestep_embedding(t, self.time_dim).to(self.region.weight.dtype)) + self.region(region)

    def forward(self, x, t, region, extra=None):
        temb = self.embed(t, region)
        h1 = self.enc1(x, temb, extra)
        h2 = self.enc2(F.avg_pool3d(h1, 2), temb)
        return temb, h1, self.mid(h2, temb)


class ToyUNet(nn.Module):
    """Two-level conditional U-Net; channel 0 of the input is x_t, the rest are conditions.

    Returns the noise estimate. With ``cfg.prediction == "v"`` the schedule's alpha_bar
    table is needed to convert the head output.
    """

    def __init__(self, in_channels: int, cfg: ToyNetConfig = ToyNetConfig(), alpha_bar=None):
        super().__init__()
        c = cfg.base_channels
        self.cfg = cfg
        self.in_channels = in_channels
        if cfg.prediction not in ("eps", "v"):
            raise InvalidArgument(f"unknown prediction target {cfg.prediction!r}")
        if cfg.prediction == "v":
            if alpha_bar is None:
                raise InvalidArgument("v prediction needs the schedule's alpha_bar table")
            self.register_buffer("alpha_bar", torch.tensor(np.array(alpha_bar), dtype=torch.float64),
                                 persistent=False)
        self.encoder = Encoder(in_channels, cfg)
        self.dec1 = ConvBlock(3 * c, c, cfg.time_dim)
        self.out = nn.Conv3d(c, 1, 3, padding=1)

    def forward(self, x, t, region, target=None, controls=None):
        temb, h1, m = self.encoder(x, t, region)
        if controls is not None:
            h1 = h1 + controls[0]
            m = m + controls[1]
        u = F.interpolate(m, scale_factor=2, mode="nearest")
        head = self.out(self.dec1(torch.cat([u, h1], dim=1), temb))[:, 0]
        if self.cfg.prediction == "eps":
            return head
        ab = self.alpha_bar[t].to(head.dtype)[:, None, None, None]
        return ab.sqrt() * head + (1.0 - ab).sqrt() * x[:, 0]


def network_input(x_t, cond: ConditionBundle, layout: ChannelLayout | None = None) -> tuple[np.ndarray, int]:
    x_t = np.asarray(x_t)
    if x_t.shape != cond.shape:
        raise ShapeError(f"x_t shape {x_t.shape} != condition shape {cond.shape}")
    channels, region = assemble_condition_channels(cond, layout)
    return np.concatenate([x_t[None].astype(np.float64), channels], axis=0), region


def batch_tensors(xs, ts, conds, layout, dtype=torch.float32):
    inputs, regions, targets = [], [], []
    for x, c in zip(xs, conds):
        inp, r = network_input(x, c, layout)
        inputs.append(inp)
        regions.append(r)
        targets.append(c.target)
    x = torch.as_tensor(np.stack(inputs), dtype=dtype)
    t = torch.as_tensor(np.asarray(ts, dtype=np.int64))
    region = torch.as_tensor(np.asarray(regions, dtype=np.int64))
    target = None
    if all(tg is not None for tg in targets):
        target = torch.as_tensor(np.stack(targets)[:, None], dtype=dtype)
    return x, t, region, target


class TorchDenoiser:
    """Adapts a torch module to the numpy call contract ``d(x_t, t, cond) -> eps_hat``."""

    def __init__(self, model: nn.Module, layout: ChannelLayout):
        self.model = model.eval()
        self.layout = layout
        self.dtype = next(model.parameters()).dtype

    def __call__(self, x_t, t: int, cond: ConditionBundle) -> np.ndarray:
        x, tt, region, target = batch_tensors([x_t], [t], [cond], self.layout, self.dtype)
        with torch.no_grad():
            out = self.model(x, tt, region, target)
        return out[0].numpy().astype(np.float64)
