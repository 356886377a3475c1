"""Frozen-base adapter for task-specific target conditions.

A trainable copy of the base encoder reads the same inputs plus features of the target
condition, and feeds the base decoder through 1x1x1 convolutions initialised to zero, so
a fresh adapter reproduces the base model exactly.
"""

from __future__ import annotations

import copy

from torch import nn
from torch.nn import functional as F

from ..errors import MissingConditionError
from .toynet import ToyUNet


class TargetEncoder(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(1, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, target):
        return self.conv2(F.silu(self.conv1(target)))


def zero_conv(channels: int) -> nn.Conv3d:
    conv = nn.Conv3d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlAdapter(nn.Module):
    def __init__(self, base: ToyUNet):
        super().__init__()
        c = base.cfg.base_channels
        self.cfg = base.cfg
        self.in_channels = base.in_channels
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.copy = copy.deepcopy(base.encoder)
        for p in self.copy.parameters():
            p.requires_grad_(True)
        self.target_encoder = TargetEncoder(c)
        self.link_skip = zero_conv(c)
        self.link_mid = zero_conv(2 * c)

    def train(self, mode: bool = True):
        super().train(mode)
        self.base.eval()
        return self

    def forward(self, x, t, region, target=None, controls=None):
        if target is None:
            raise MissingConditionError("control adapter needs a target condition")
        _, h1, m = self.copy(x, t, region, extra=self.target_encoder(target))
        return self.base(x, t, region, controls=(self.link_skip(h1), self.link_mid(m)))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
