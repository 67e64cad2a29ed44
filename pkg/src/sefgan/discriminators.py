"""Adversarial critics: multi-period and multi-scale waveform discriminators.

The default ensemble is five period discriminators (periods 2, 3, 5, 7, 11)
plus three scale discriminators (raw, x2 pooled, x4 pooled) for eight
critics total. Channel widths follow the usual waveform-GAN critic layout
at a quarter of the width; all widths are configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from . import NumericalError
from .config import DiscEnsembleConfig


@dataclass
class DiscOutput:
    """Patch-level score map plus intermediate activations for matching."""

    score: Tensor
    features: list[Tensor]


def fold_period(x: Tensor, period: int) -> Tensor:
    """Fold [B, 1, L] audio into a [B, 1, period, L/period] grid.

    Row r holds the samples whose index is congruent to r modulo the period;
    non-divisible lengths are reflect-padded first.
    """
    b, c, length = x.shape
    rem = length % period
    if rem:
        x = F.pad(x, (0, period - rem), mode="reflect")
        length += period - rem
    return x.view(b, c, length // period, period).transpose(2, 3)


def _norm(module: nn.Module, use_spectral: bool) -> nn.Module:
    return spectral_norm(module) if use_spectral else weight_norm(module)


class PeriodDiscriminator(nn.Module):
    """2-D strided critic over one period fold of the waveform."""

    def __init__(self, period: int, channels: int = 8, max_channels: int = 256):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        out_ch = channels
        for stride in (3, 3, 3, 3, 1):
            convs.append(
                weight_norm(
                    nn.Conv2d(in_ch, out_ch, (1, 5), (1, stride), padding=(0, 2))
                )
            )
            in_ch = out_ch
            out_ch = min(out_ch * 4, max_channels)
        self.convs = nn.ModuleList(convs)
        self.post = weight_norm(nn.Conv2d(in_ch, 1, (1, 3), padding=(0, 1)))
        self.activation = nn.LeakyReLU(0.1)

    def forward(self, x: Tensor) -> DiscOutput:
        h = fold_period(x, self.period)
        features = []
        for conv in self.convs:
            h = self.activation(conv(h))
            features.append(h)
        return DiscOutput(score=self.post(h), features=features)


class ScaleDiscriminator(nn.Module):
    """1-D strided critic, optionally after rounds of x2 mean pooling."""

    def __init__(
        self,
        pool_rounds: int,
        channels: int = 32,
        max_channels: int = 256,
        use_spectral: bool = False,
    ):
        super().__init__()
        self.pool_rounds = pool_rounds
        c = channels
        layer_specs = [
            # (out_channels, kernel, stride, groups)
            (c, 15, 1, 1),
            (c, 41, 2, 4),
            (min(2 * c, max_channels), 41, 2, 16),
            (min(4 * c, max_channels), 41, 4, 16),
            (min(8 * c, max_channels), 41, 4, 16),
            (min(8 * c, max_channels), 41, 1, 16),
            (min(8 * c, max_channels), 5, 1, 1),
        ]
        convs = []
        in_ch = 1
        for out_ch, kernel, stride, groups in layer_specs:
            groups = math.gcd(groups, math.gcd(in_ch, out_ch))
            convs.append(
                _norm(
                    nn.Conv1d(
                        in_ch, out_ch, kernel, stride,
                        padding=kernel // 2, groups=groups,
                    ),
                    use_spectral,
                )
            )
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.post = _norm(nn.Conv1d(in_ch, 1, 3, padding=1), use_spectral)
        self.activation = nn.LeakyReLU(0.1)

    def forward(self, x: Tensor) -> DiscOutput:
        h = x
        for _ in range(self.pool_rounds):
            h = F.avg_pool1d(h, kernel_size=2, stride=2)
        features = []
        for conv in self.convs:
            h = self.activation(conv(h))
            features.append(h)
        return DiscOutput(score=self.post(h), features=features)


class DiscriminatorEnsemble(nn.Module):
    """All critics, evaluated in a stable order: periods ascending, then
    scales ascending."""

    def __init__(self, cfg: DiscEnsembleConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscEnsembleConfig()
        self.cfg.validate()
        self.period_discs = nn.ModuleList(
            PeriodDiscriminator(p, self.cfg.mpd_channels, self.cfg.max_channels)
            for p in sorted(self.cfg.periods)
        )
        # Spectral norm on the raw-scale critic, weight norm elsewhere.
        self.scale_discs = nn.ModuleList(
            ScaleDiscriminator(
                k, self.cfg.msd_channels, self.cfg.max_channels,
                use_spectral=(k == 0),
            )
            for k in range(self.cfg.scales)
        )

    def __len__(self) -> int:
        return len(self.period_discs) + len(self.scale_discs)

    def forward(self, audio: Tensor) -> list[DiscOutput]:
        if audio.dim() == 2:
            audio = audio.unsqueeze(1)
        if not torch.isfinite(audio).all():
            raise NumericalError("discriminator input contains non-finite samples")
        outputs = [disc(audio) for disc in self.period_discs]
        outputs += [disc(audio) for disc in self.scale_discs]
        return outputs
