"""The invertible flow network.

A waveform is squeezed into ``s`` channels, then passed through a stack of
blocks, each a learned invertible channel-mixing matrix followed by an
affine coupling layer whose scale/shift come from a dilated
depthwise-separable subnet conditioned on per-block feature maps. At fixed
depths part of the channels is routed straight to the latent (multi-scale
early outputs). Forward maps audio to a latent of the same dimensionality
while accumulating the exact log-determinant of the Jacobian; inverse is the
exact algorithmic reverse.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from torch import Tensor
from torch.nn.utils.parametrizations import weight_norm

from . import ConfigError, NumericalError, ShapeError
from .conditioning import build_conditioner, gated_tanh
from .config import CondNetConfig, FlowConfig
from .losses import nll_loss

SINGULAR_DET_FLOOR = 1e-12
LOG_SCALE_CLAMP = 7.0


def squeeze(w: Tensor, factor: int) -> Tensor:
    """Reshape [..., N] audio into [..., factor, N/factor] channels.

    Channel c, frame t holds sample ``w[..., t*factor + c]``; exactly undone
    by :func:`unsqueeze`.
    """
    n = w.shape[-1]
    if n % factor != 0:
        raise ShapeError(
            f"length {n} is not divisible by squeeze factor {factor}; "
            f"pad with {(-n) % factor} trailing samples first"
        )
    frames = n // factor
    return w.reshape(*w.shape[:-1], frames, factor).transpose(-1, -2).contiguous()


def unsqueeze(h: Tensor) -> Tensor:
    """Inverse of :func:`squeeze`: [..., C, T] back to [..., C*T]."""
    channels, frames = h.shape[-2], h.shape[-1]
    return h.transpose(-1, -2).reshape(*h.shape[:-2], channels * frames)


class InvertibleConv1x1(nn.Module):
    """Learned channel-mixing matrix applied per frame.

    Initialized as a random orthogonal matrix so the log-determinant starts
    at zero.
    """

    def __init__(self, channels: int):
        super().__init__()
        init = torch.linalg.qr(torch.randn(channels, channels))[0]
        self.weight = nn.Parameter(init)

    def forward(self, h: Tensor, inverse: bool = False) -> tuple[Tensor, Tensor]:
        if h.shape[-2] != self.weight.shape[0]:
            raise ShapeError(
                f"expected {self.weight.shape[0]} channels, got {h.shape[-2]}"
            )
        sign, logabsdet = torch.linalg.slogdet(self.weight)
        if sign.item() == 0 or logabsdet.item() < math.log(SINGULAR_DET_FLOOR):
            raise NumericalError(
                "channel-mixing matrix is numerically singular "
                f"(log|det| = {logabsdet.item():.3g})"
            )
        frames = h.shape[-1]
        logdet = frames * logabsdet.double()
        mat = self.weight
        if inverse:
            mat = torch.linalg.inv(self.weight)
            logdet = -logdet
        out = torch.einsum("ij,...jt->...it", mat, h)
        return out, logdet.expand(h.shape[:-2])


class DepthwiseSeparableConv1d(nn.Module):
    """Dilated depthwise convolution followed by a pointwise projection."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, dilation: int):
        super().__init__()
        pad = (kernel - 1) * dilation // 2
        self.depthwise = weight_norm(
            nn.Conv1d(
                in_channels, in_channels, kernel,
                dilation=dilation, padding=pad, groups=in_channels,
            )
        )
        self.pointwise = weight_norm(nn.Conv1d(in_channels, out_channels, 1))

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class CouplingSubnet(nn.Module):
    """WaveNet-like stack predicting the coupling scale and shift.

    Dilations double per layer; conditioning is injected into every layer
    through the gated tanh. The final projection is zero-initialized so each
    coupling starts as the identity map.
    """

    def __init__(
        self,
        half_channels: int,
        cond_channels: int,
        hidden: int,
        layers: int,
        kernel: int,
    ):
        super().__init__()
        self.hidden = hidden
        self.n_layers = layers
        self.start = weight_norm(nn.Conv1d(half_channels, hidden, 1))
        self.cond_layer = weight_norm(
            nn.Conv1d(cond_channels, 2 * hidden * layers, 1)
        )
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        for i in range(layers):
            self.in_layers.append(
                DepthwiseSeparableConv1d(hidden, 2 * hidden, kernel, 2**i)
            )
            res_skip_channels = 2 * hidden if i < layers - 1 else hidden
            self.res_skip_layers.append(
                weight_norm(nn.Conv1d(hidden, res_skip_channels, 1))
            )
        self.end = nn.Conv1d(hidden, 2 * half_channels, 1)
        nn.init.zeros_(self.end.weight)
        nn.init.zeros_(self.end.bias)

    def forward(self, h1: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = self.start(h1)
        cond_all = self.cond_layer(cond)
        skip = torch.zeros_like(h)
        for i in range(self.n_layers):
            cond_i = cond_all.narrow(-2, 2 * self.hidden * i, 2 * self.hidden)
            acts = gated_tanh(self.in_layers[i](h), cond_i)
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                h = h + res_skip.narrow(-2, 0, self.hidden)
                skip = skip + res_skip.narrow(-2, self.hidden, self.hidden)
            else:
                skip = skip + res_skip
        log_s, t = self.end(skip).chunk(2, dim=-2)
        return log_s, t


class AffineCoupling(nn.Module):
    """Half the channels pass through and drive an affine map of the rest."""

    def __init__(
        self,
        channels: int,
        cond_channels: int,
        hidden: int,
        layers: int,
        kernel: int,
    ):
        super().__init__()
        if channels % 2 != 0:
            raise ConfigError(
                f"coupling layer needs an even channel count, got {channels}"
            )
        self.half = channels // 2
        self.subnet = CouplingSubnet(self.half, cond_channels, hidden, layers, kernel)

    def forward(
        self, h: Tensor, cond: Tensor, inverse: bool = False
    ) -> tuple[Tensor, Tensor]:
        if cond.shape[-1] != h.shape[-1]:
            raise ConfigError(
                f"conditioning length {cond.shape[-1]} does not match "
                f"signal frames {h.shape[-1]}"
            )
        h1 = h.narrow(-2, 0, self.half)
        h2 = h.narrow(-2, self.half, self.half)
        log_s, t = self.subnet(h1, cond)
        log_s = log_s.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        if inverse:
            h2 = (h2 - t) * torch.exp(-log_s)
            logdet = -log_s.double().sum(dim=(-1, -2))
        else:
            h2 = h2 * torch.exp(log_s) + t
            logdet = log_s.double().sum(dim=(-1, -2))
        return torch.cat([h1, h2], dim=-2), logdet


class FlowBlock(nn.Module):
    """One invertible step: channel mixing then affine coupling."""

    def __init__(
        self,
        index: int,
        channels: int,
        cond_channels: int,
        hidden: int,
        layers: int,
        kernel: int,
    ):
        super().__init__()
        self.index = index
        self.invconv = InvertibleConv1x1(channels)
        self.coupling = AffineCoupling(channels, cond_channels, hidden, layers, kernel)

    def forward(
        self, h: Tensor, cond: Tensor, inverse: bool = False
    ) -> tuple[Tensor, Tensor]:
        if inverse:
            h, ld_c = self.coupling(h, cond, inverse=True)
            h, ld_w = self.invconv(h, inverse=True)
        else:
            h, ld_w = self.invconv(h)
            h, ld_c = self.coupling(h, cond)
        if not torch.isfinite(h).all():
            raise NumericalError(f"non-finite activations in flow block {self.index}")
        return h, ld_w + ld_c


class SpeechFlow(nn.Module):
    """The full conditional flow: squeeze, blocks, multi-scale early outputs.

    ``forward`` maps a waveform batch [B, N] plus a per-block conditioning
    stack to a latent [B, N] and the per-item log-determinant (float64);
    ``inverse`` is its exact reverse. The latent keeps the early-output
    channel groups first and the final channels last, flattened with the
    same interleaving as :func:`unsqueeze`.
    """

    def __init__(self, flow_cfg: FlowConfig, cond_cfg: CondNetConfig | None = None):
        super().__init__()
        flow_cfg.validate()
        self.cfg = flow_cfg
        self.cond_cfg = cond_cfg or CondNetConfig()
        self.conditioner = build_conditioner(flow_cfg, self.cond_cfg)
        widths = flow_cfg.block_channels()
        self.blocks = nn.ModuleList(
            FlowBlock(
                b,
                widths[b],
                flow_cfg.cond_channels,
                flow_cfg.subnet_channels,
                flow_cfg.subnet_layers,
                flow_cfg.subnet_kernel,
            )
            for b in range(flow_cfg.n_blocks)
        )
        self._early_splits = set(flow_cfg.early_split_blocks())

    @property
    def squeeze_factor(self) -> int:
        return self.cfg.squeeze_factor

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_cond_stack(self, cond_stack: list[Tensor], frames: int) -> None:
        if len(cond_stack) != len(self.blocks):
            raise ConfigError(
                f"conditioning stack has {len(cond_stack)} maps for "
                f"{len(self.blocks)} flow blocks"
            )
        for i, cond in enumerate(cond_stack):
            if cond.shape[-1] != frames:
                raise ConfigError(
                    f"conditioning map {i} has length {cond.shape[-1]}, "
                    f"expected {frames}"
                )

    def build_cond_stack(self, y: Tensor) -> list[Tensor]:
        """Per-block conditioning features from the noisy waveform [B, N]."""
        return self.conditioner(squeeze(y, self.cfg.squeeze_factor))

    def forward(
        self, x: Tensor, cond_stack: list[Tensor]
    ) -> tuple[Tensor, Tensor]:
        if x.dim() != 2:
            raise ShapeError(f"expected a [batch, samples] waveform, got {x.dim()}-d")
        h = squeeze(x, self.cfg.squeeze_factor)
        self._check_cond_stack(cond_stack, h.shape[-1])
        logdet = torch.zeros(x.shape[0], dtype=torch.float64, device=x.device)
        early = self.cfg.early_output_channels
        parts = []
        for b, block in enumerate(self.blocks):
            if b in self._early_splits:
                parts.append(h.narrow(1, 0, early))
                h = h.narrow(1, early, h.shape[1] - early)
            h, ld = block(h, cond_stack[b])
            logdet = logdet + ld
        parts.append(h)
        z = unsqueeze(torch.cat(parts, dim=1))
        return z, logdet

    def inverse(self, z: Tensor, cond_stack: list[Tensor]) -> Tensor:
        if z.dim() != 2:
            raise ShapeError(f"expected a [batch, samples] latent, got {z.dim()}-d")
        zs = squeeze(z, self.cfg.squeeze_factor)
        self._check_cond_stack(cond_stack, zs.shape[-1])
        early = self.cfg.early_output_channels
        n_early = len(self._early_splits)
        sizes = [early] * n_early + [self.cfg.final_channels()]
        parts = torch.split(zs, sizes, dim=1)
        h = parts[-1]
        next_early = n_early - 1
        for b in reversed(range(len(self.blocks))):
            h, _ = self.blocks[b](h, cond_stack[b], inverse=True)
            if b in self._early_splits:
                h = torch.cat([parts[next_early], h], dim=1)
                next_early -= 1
        return unsqueeze(h)

    def log_likelihood(self, x: Tensor, y: Tensor) -> Tensor:
        """Per-item negative log-likelihood in nats per dimension.

        ``x`` (clean) and ``y`` (noisy) must be equal length and divisible
        by the squeeze factor.
        """
        if x.shape != y.shape:
            raise ShapeError(
                f"clean {tuple(x.shape)} and noisy {tuple(y.shape)} shapes differ"
            )
        cond_stack = self.build_cond_stack(y)
        z, logdet = self.forward(x, cond_stack)
        return nll_loss(z, logdet)
