"""Convolutional analysis (encoder) and synthesis (decoder) transforms.

Four stride-2 stages map images to a 16x-downsampled latent and back.  Each
non-final encoder stage stacks residual bottleneck blocks after its
downsampling convolution; configured stages end in a simplified residual
non-local attention block.  The decoder mirrors the encoder with transposed
convolutions.  Stage outputs are exposed through an optional tap callback so
the text adapter can rewrite features mid-encode without the transform
knowing anything about text.
"""

from __future__ import annotations

from typing import Callable, Optional

import torch
from torch import nn

from .config import BackboneConfig
from .errors import ShapeError


def conv_down(in_ch: int, out_ch: int) -> nn.Conv2d:
    """5x5 stride-2 convolution halving each spatial dimension."""
    return nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2)


def conv_up(in_ch: int, out_ch: int) -> nn.ConvTranspose2d:
    """5x5 stride-2 transposed convolution doubling each spatial dimension."""
    return nn.ConvTranspose2d(in_ch, out_ch, kernel_size=5, stride=2,
                              padding=2, output_padding=1)


class ResidualBottleneckBlock(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand with a skip connection."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        mid = channels // 2
        self.branch = nn.Sequential(
            nn.Conv2d(channels, mid, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.branch(x)


class _ResidualUnit(nn.Module):
    """Bottleneck residual unit with a trailing ReLU (attention internals)."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        mid = channels // 2
        self.branch = nn.Sequential(
            nn.Conv2d(channels, mid, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 1),
        )
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(x + self.branch(x))


class AttentionBlock(nn.Module):
    """Simplified residual non-local attention: trunk gated by a mask branch."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.trunk = nn.Sequential(*(_ResidualUnit(channels) for _ in range(3)))
        self.mask = nn.Sequential(
            *(_ResidualUnit(channels) for _ in range(3)),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


TapFn = Callable[[int, torch.Tensor], torch.Tensor]


class AnalysisTransform(nn.Module):
    """Image -> latent, stage outputs optionally rewritten by a tap callback."""

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        stages = []
        for stage in range(1, cfg.num_stages + 1):
            in_ch = cfg.image_channels if stage == 1 else cfg.base_channels
            out_ch = (cfg.latent_channels if stage == cfg.num_stages
                      else cfg.base_channels)
            layers: list[nn.Module] = [conv_down(in_ch, out_ch)]
            if stage < cfg.num_stages:
                layers.extend(ResidualBottleneckBlock(out_ch)
                              for _ in range(cfg.blocks_per_stage))
            if stage in cfg.attention_stages:
                layers.append(AttentionBlock(out_ch))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    def stage_channels(self, stage: int) -> int:
        if not 1 <= stage <= self.cfg.num_stages:
            raise ShapeError(f"stage {stage} outside 1..{self.cfg.num_stages}")
        return (self.cfg.latent_channels if stage == self.cfg.num_stages
                else self.cfg.base_channels)

    def forward(self, x: torch.Tensor, tap: Optional[TapFn] = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.image_channels:
            raise ShapeError(
                f"expected (B,{self.cfg.image_channels},H,W), got {tuple(x.shape)}"
            )
        factor = self.cfg.downsample_factor
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(
                f"spatial dims {tuple(x.shape[-2:])} must be multiples of {factor}"
            )
        for index, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if tap is not None:
                x = tap(index, x)
        return x


class SynthesisTransform(nn.Module):
    """Latent -> image; the mirror of :class:`AnalysisTransform`."""

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        stages = []
        for stage in range(cfg.num_stages, 0, -1):
            in_ch = (cfg.latent_channels if stage == cfg.num_stages
                     else cfg.base_channels)
            out_ch = cfg.image_channels if stage == 1 else cfg.base_channels
            layers: list[nn.Module] = []
            if stage in cfg.attention_stages:
                layers.append(AttentionBlock(in_ch))
            if stage < cfg.num_stages:
                layers.extend(ResidualBottleneckBlock(in_ch)
                              for _ in range(cfg.blocks_per_stage))
            layers.append(conv_up(in_ch, out_ch))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.cfg.latent_channels:
            raise ShapeError(
                f"expected (B,{self.cfg.latent_channels},h,w) latent, "
                f"got {tuple(y_hat.shape)}"
            )
        x = y_hat
        for stage in self.stages:
            x = stage(x)
        return x
