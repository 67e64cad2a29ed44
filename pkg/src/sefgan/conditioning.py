"""Conditioning networks that turn the noisy signal into per-block features.

Two variants share one interface (list of ``[cond_channels x T]`` maps, one
per flow block):

* ``CondNet``: a stride-1 convolutional encoder over the squeezed noisy
  signal whose layer widths grow by a fixed amount per layer; each layer's
  output is projected to ``cond_channels`` by its own cond block.
* ``BaselineConditioner``: one independent depthwise-separable layer per
  flow block, with no shared representation between blocks.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from torch import Tensor

from . import ConfigError
from .config import CondNetConfig, FlowConfig


def gated_tanh(hidden: Tensor, cond: Tensor) -> Tensor:
    """tanh(a_h + a_c) * sigmoid(b_h + b_c), halving the channel count.

    Both inputs carry ``2*C`` channels; the first half feeds the tanh path
    and the second half the sigmoid gate. Output is bounded in (-1, 1).
    """
    if hidden.shape != cond.shape:
        raise ConfigError(
            f"gated injection shape mismatch: hidden {tuple(hidden.shape)} "
            f"vs cond {tuple(cond.shape)}"
        )
    if hidden.size(-2) % 2 != 0:
        raise ConfigError("gated injection needs an even channel count")
    a_h, b_h = hidden.chunk(2, dim=-2)
    a_c, b_c = cond.chunk(2, dim=-2)
    return torch.tanh(a_h + a_c) * torch.sigmoid(b_h + b_c)


class CondNet(nn.Module):
    """Stride-1 encoder plus per-layer projections to the coupling width.

    Layer ``i`` (1-based) outputs ``channel_growth * i`` channels; stride 1
    with symmetric padding keeps the spatial length T at every depth so the
    features line up with the coupling layers frame for frame.
    """

    def __init__(self, flow_cfg: FlowConfig, cond_cfg: CondNetConfig):
        super().__init__()
        cond_cfg.validate()
        n_layers = flow_cfg.n_blocks
        growth = cond_cfg.channel_growth
        kernel = cond_cfg.kernel_size
        pad = kernel // 2

        self.encoder = nn.ModuleList()
        self.cond_blocks = nn.ModuleList()
        in_ch = flow_cfg.squeeze_factor
        for i in range(1, n_layers + 1):
            out_ch = growth * i
            self.encoder.append(nn.Conv1d(in_ch, out_ch, kernel, padding=pad))
            block = nn.Conv1d(out_ch, flow_cfg.cond_channels, 1)
            nn.init.zeros_(block.bias)
            self.cond_blocks.append(block)
            in_ch = out_ch
        self.activation = nn.LeakyReLU(0.1)

    def encode(self, y_squeezed: Tensor) -> list[Tensor]:
        """All encoder layer outputs, shallow to deep."""
        feats = []
        h = y_squeezed
        for layer in self.encoder:
            h = self.activation(layer(h))
            feats.append(h)
        return feats

    def forward(self, y_squeezed: Tensor) -> list[Tensor]:
        return [
            block(feat)
            for block, feat in zip(self.cond_blocks, self.encode(y_squeezed))
        ]


class BaselineConditioner(nn.Module):
    """Per-block single depthwise-separable layer over the squeezed input.

    Each flow block gets its own features with no connection between the
    per-block branches.
    """

    def __init__(self, flow_cfg: FlowConfig, cond_cfg: CondNetConfig):
        super().__init__()
        s = flow_cfg.squeeze_factor
        kernel = cond_cfg.kernel_size
        pad = kernel // 2
        self.layers = nn.ModuleList()
        for _ in range(flow_cfg.n_blocks):
            self.layers.append(
                nn.Sequential(
                    nn.Conv1d(s, s, kernel, padding=pad, groups=s),
                    nn.Conv1d(s, flow_cfg.cond_channels, 1),
                )
            )

    def forward(self, y_squeezed: Tensor) -> list[Tensor]:
        return [layer(y_squeezed) for layer in self.layers]


def build_conditioner(flow_cfg: FlowConfig, cond_cfg: CondNetConfig) -> nn.Module:
    if cond_cfg.use_cond_net:
        return CondNet(flow_cfg, cond_cfg)
    return BaselineConditioner(flow_cfg, cond_cfg)
