"""Residual cells for 1-D (text) feature maps, shaped (batch, channels, length)."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigurationError

BN_EPS = 1e-5


class SqueezeExcitation(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=2)
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s.unsqueeze(2)


class MultiKernelConv(nn.Module):
    """Parallel same-padded convolutions of different widths, outputs summed."""

    def __init__(self, channels: int, kernels=(3, 5, 7)):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(channels, channels, k, padding=k // 2) for k in kernels)

    def forward(self, x):
        return sum(conv(x) for conv in self.convs)


class _ResidualCell(nn.Module):
    def __init__(self, channels: int, kernel: int, reduction: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel}")
        self.channels = channels
        self.bn = nn.BatchNorm1d(channels, eps=BN_EPS, momentum=0.1)
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.se = SqueezeExcitation(channels, reduction)

    def _check(self, x):
        if x.dim() != 3 or x.shape[1] != self.channels:
            raise ConfigurationError(
                f"{type(self).__name__} expects (batch, {self.channels}, length), got {tuple(x.shape)}")

    def branch(self, x):
        return self.se(self.conv(F.silu(self.bn(x))))

    def final_layers(self) -> list[nn.Module]:
        raise NotImplementedError

    def zero_init(self) -> None:
        """Zero the last convolution(s) so the cell starts as the identity."""
        for conv in self.final_layers():
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)


class ResidualCell1(_ResidualCell):
    """x + MultiConv(SE(Conv(Swish(BN(x))))): the wider cell used in blocks."""

    def __init__(self, channels: int, kernel: int = 3, mul_kernels=(3, 5, 7),
                 reduction: int = 16, zero_init: bool = False):
        super().__init__(channels, kernel, reduction)
        if any(k % 2 == 0 for k in mul_kernels):
            raise ConfigurationError(f"kernel sizes must be odd, got {tuple(mul_kernels)}")
        self.conv_mul = MultiKernelConv(channels, mul_kernels)
        if zero_init:
            self.zero_init()

    def final_layers(self):
        return list(self.conv_mul.convs)

    def forward(self, x):
        self._check(x)
        return x + self.conv_mul(self.branch(x))


class ResidualCell2(_ResidualCell):
    """x + SE(Conv(Swish(BN(x)))): the lighter cell used inside latent groups."""

    def __init__(self, channels: int, kernel: int = 3, reduction: int = 16, zero_init: bool = False):
        super().__init__(channels, kernel, reduction)
        if zero_init:
            self.zero_init()

    def final_layers(self):
        return [self.conv]

    def forward(self, x):
        self._check(x)
        return x + self.branch(x)
