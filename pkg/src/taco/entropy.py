"""Probability models and quantization for the latent tensors.

The main latent y is modeled as a discretized Gaussian whose means and scales
come from the hyperprior branch; the side latent z uses a learned per-channel
non-parametric density.  Both models export the integer CDF tables
(:mod:`taco.cdf`) that the entropy coders consume, so estimated and coded
rates agree up to table quantization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import cdf as cdf_lib
from .errors import CodingError, NumericError, ShapeError

LIKELIHOOD_FLOOR = 1e-9
SCALE_MIN = 0.11


class _LowerBound(torch.autograd.Function):
    """Clamp from below, passing gradients that push back above the bound."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, bound: float) -> torch.Tensor:
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad_output < 0)
        return grad_output * keep, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


@dataclass
class QuantizedLatent:
    """Integer symbols plus the real-valued offsets they were centered on."""

    symbols: torch.Tensor  # integer-valued
    offsets: torch.Tensor | None  # means; None encodes an all-zero offset

    @property
    def dequantized(self) -> torch.Tensor:
        if self.offsets is None:
            return self.symbols.to(torch.float32)
        return self.symbols.to(self.offsets.dtype) + self.offsets


def quantize(
    y: torch.Tensor, mode: str, means: torch.Tensor | None = None
) -> QuantizedLatent | torch.Tensor:
    """Quantize latents: hard rounding in eval, additive noise in train.

    ``eval`` returns a :class:`QuantizedLatent` with ``symbols = round(y - means)``;
    ``train`` returns the differentiable surrogate ``y + U(-0.5, 0.5)``.
    """
    if not torch.isfinite(y).all():
        raise NumericError("latent tensor contains non-finite values")
    if mode == "train":
        noise = torch.empty_like(y).uniform_(-0.5, 0.5)
        return y + noise
    if mode == "eval":
        centered = y if means is None else y - means
        return QuantizedLatent(symbols=torch.round(centered), offsets=means)
    raise ValueError(f"unknown quantization mode {mode!r}")


def ste_round(y: torch.Tensor, means: torch.Tensor | None = None) -> torch.Tensor:
    """Round-to-integer (about ``means``) with a straight-through gradient."""
    centered = y if means is None else y - means
    rounded = torch.round(centered) if means is None else torch.round(centered) + means
    return y + (rounded - y).detach()


def discrete_gaussian_likelihood(
    values: torch.Tensor,
    means: torch.Tensor,
    scales: torch.Tensor,
    floor: float = LIKELIHOOD_FLOOR,
    scale_min: float = SCALE_MIN,
) -> torch.Tensor:
    """P(round of a Gaussian lands in the unit bin around ``values``).

    p = Phi((v - mu + 0.5)/sigma) - Phi((v - mu - 0.5)/sigma), floored for
    numerical safety.  ``values`` may be integer symbols or noisy surrogates.
    """
    sigma = lower_bound(scales, scale_min)
    centered = values - means
    upper = torch.special.ndtr((centered + 0.5) / sigma)
    lower = torch.special.ndtr((centered - 0.5) / sigma)
    return lower_bound(upper - lower, floor)


def rate_bits(likelihoods: torch.Tensor | list[torch.Tensor],
              floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """Total information content in bits across all likelihood tensors."""
    if torch.is_tensor(likelihoods):
        likelihoods = [likelihoods]
    total = None
    for lik in likelihoods:
        bits = (-torch.log2(torch.clamp(lik, min=floor))).sum()
        total = bits if total is None else total + bits
    if total is None:
        raise ValueError("at least one likelihood tensor required")
    return total


def rate_bpp(likelihoods: torch.Tensor | list[torch.Tensor],
             num_pixels: int) -> torch.Tensor:
    """Bits per pixel implied by the likelihoods of everything in the file."""
    if num_pixels <= 0:
        raise ValueError(f"num_pixels must be positive, got {num_pixels}")
    return rate_bits(likelihoods) / num_pixels


class HyperAnalysis(nn.Module):
    """y -> z: reduces the latent to side information 4x smaller per axis."""

    def __init__(self, latent_channels: int, hyper_channels: int) -> None:
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(latent_channels, hyper_channels, 3, stride=1, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4:
            raise ShapeError(f"expected (B,C,H,W) latent, got shape {tuple(y.shape)}")
        return self.layers(y)


class HyperSynthesis(nn.Module):
    """z_hat -> (means, scales) matching the main latent's shape."""

    def __init__(self, latent_channels: int, hyper_channels: int,
                 scale_min: float = SCALE_MIN) -> None:
        super().__init__()
        mid = hyper_channels * 3 // 2
        self.scale_min = scale_min
        self.layers = nn.Sequential(
            nn.ConvTranspose2d(hyper_channels, hyper_channels, 5, stride=2,
                               padding=2, output_padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(hyper_channels, mid, 5, stride=2,
                               padding=2, output_padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, latent_channels * 2, 3, stride=1, padding=1),
        )

    def forward(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if z_hat.dim() != 4:
            raise ShapeError(f"expected (B,C,h,w) side latent, got {tuple(z_hat.shape)}")
        means, raw_scales = self.layers(z_hat).chunk(2, dim=1)
        return means, lower_bound(raw_scales, self.scale_min)


class FactorizedDensity(nn.Module):
    """Learned per-channel density for the side latent z.

    Each channel gets an independent monotone cumulative function built from
    small matrix/bias/factor stages; probabilities of integer bins come from
    differences of that CDF at half-integer points.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0) -> None:
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(dims) - 1))
        self._num_stages = len(dims) - 1
        for k in range(self._num_stages):
            init = math.log(math.expm1(1 / scale / dims[k + 1]))
            matrix = torch.full((channels, dims[k + 1], dims[k]), init)
            self.register_parameter(f"matrix{k}", nn.Parameter(matrix))
            bias = torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5)
            self.register_parameter(f"bias{k}", nn.Parameter(bias))
            if k < self._num_stages - 1:
                factor = torch.zeros(channels, dims[k + 1], 1)
                self.register_parameter(f"factor{k}", nn.Parameter(factor))

    def _logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, N) points per channel
        for k in range(self._num_stages):
            matrix = F.softplus(getattr(self, f"matrix{k}"))
            x = torch.matmul(matrix, x) + getattr(self, f"bias{k}")
            if k < self._num_stages - 1:
                factor = torch.tanh(getattr(self, f"factor{k}"))
                x = x + factor * torch.tanh(x)
        return x

    def likelihood(self, values: torch.Tensor,
                   floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
        """Per-element bin probabilities for a (B, C, H, W) tensor."""
        if values.dim() != 4 or values.shape[1] != self.channels:
            raise ShapeError(
                f"expected (B,{self.channels},h,w), got {tuple(values.shape)}"
            )
        b, c, h, w = values.shape
        flat = values.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits_cumulative(flat - 0.5)
        upper = self._logits_cumulative(flat + 0.5)
        # evaluate both sigmoids on the side that avoids saturation
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return lower_bound(lik, floor)

    @torch.no_grad()
    def symbol_range(self, tail_mass: float, max_half_range: int = 4096) -> np.ndarray:
        """Smallest power-of-two per-channel L with ≤ tail_mass outside [-L, L]."""
        half = np.ones(self.channels, dtype=np.int64)
        while True:
            edges = torch.from_numpy(half.astype(np.float32)).reshape(-1, 1, 1)
            lo = torch.sigmoid(self._logits_cumulative(-edges - 0.5))
            hi = torch.sigmoid(self._logits_cumulative(edges + 0.5))
            tails = (lo + (1 - hi)).cpu().numpy().reshape(-1)
            pending = (tails > tail_mass) & (half < max_half_range)
            if not pending.any():
                return half
            half[pending] = np.minimum(half[pending] * 2, max_half_range)

    @torch.no_grad()
    def cdf_tables(self, precision: int, tail_mass: float) -> cdf_lib.CdfTable:
        """One integer CDF row per channel over that channel's symbol range."""
        half = self.symbol_range(tail_mass)
        lengths = 2 * half + 1
        max_len = int(lengths.max())
        grid = torch.arange(max_len, dtype=torch.float32).reshape(1, 1, -1)
        offs = torch.from_numpy(half.astype(np.float32)).reshape(-1, 1, 1)
        values = grid - offs  # row c, bin j -> value j - half[c]
        upper = torch.sigmoid(self._logits_cumulative(values + 0.5))
        lower = torch.sigmoid(self._logits_cumulative(values - 0.5))
        pmf = (upper - lower).squeeze(1).cpu().numpy().astype(np.float64)
        freq = cdf_lib.quantize_pmf_rows(pmf, lengths, precision)
        return cdf_lib.assemble_cdf(freq, lengths, -half, precision)


def tile_tables(channel_tables: cdf_lib.CdfTable, spatial_count: int) -> cdf_lib.CdfTable:
    """Expand per-channel tables to per-element tables for a (C, h, w) latent.

    Elements are in C-major order, so each channel's row repeats h*w times.
    """
    if spatial_count <= 0:
        raise CodingError("spatial_count must be positive")
    return cdf_lib.CdfTable(
        cdf=np.repeat(channel_tables.cdf, spatial_count, axis=0),
        lengths=np.repeat(channel_tables.lengths, spatial_count),
        offsets=np.repeat(channel_tables.offsets, spatial_count),
        precision=channel_tables.precision,
    )
