"""End-to-end compression: image (+ optional caption) -> container bytes -> image.

The encoder may read captions; the produced file never contains text and the
decoder never asks for any.  Bit-exactness contract: the quantized latents
(y and z symbols) survive the file round trip exactly, on any machine that
reproduces the model weights — reconstruction quality is the model's job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import container as container_lib
from .cdf import CdfTable, build_gaussian_tables, clamp_symbols
from .config import lambda_to_tag
from .entropy import quantize, tile_tables
from .errors import CodingError, ConfigError, ModelMismatchError, ShapeError
from .model import TextGuidedCodec
from .rangecoder import range_decode, range_encode
from .text_embedding import embed_caption

CODER_NAMES = {"ref": container_lib.CODER_REFERENCE, "rans": container_lib.CODER_RANS}


@dataclass
class CompressionDetails:
    """Side products of one compress call, for diagnostics and rate checks."""

    y_symbols: np.ndarray
    z_symbols: np.ndarray
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    estimated_bits: float
    num_pixels: int


def _encode_stream(symbols: np.ndarray, table: CdfTable, coder: str) -> bytes:
    if coder == "ref":
        return range_encode(symbols, table)
    if coder == "rans":
        from . import rans

        return rans.rans_encode(symbols, table)
    raise ConfigError(f"unknown coder {coder!r}; expected 'ref' or 'rans'")


def _decode_stream(data: bytes, table: CdfTable, coder_id: int) -> np.ndarray:
    if coder_id == container_lib.CODER_REFERENCE:
        return range_decode(data, table)
    if coder_id == container_lib.CODER_RANS:
        from . import rans

        return rans.rans_decode(data, table)
    raise CodingError(f"container written with unknown coder id {coder_id}")


def pad_image(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Pad bottom/right so both spatial dims are multiples of ``multiple``."""
    h, w = x.shape[-2:]
    pad_h = (multiple - h % multiple) % multiple
    pad_w = (multiple - w % multiple) % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    # reflect padding cannot exceed the input size; fall back for tiny images
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x.unsqueeze(0) if x.dim() == 3 else x, (0, pad_w, 0, pad_h),
                 mode=mode).reshape(*x.shape[:-2], h + pad_h, w + pad_w)


def _validate_image(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 4 and image.shape[0] == 1:
        image = image[0]
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ShapeError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ShapeError("image values must lie in [0, 1]")
    h, w = image.shape[-2:]
    if h >= 1 << 32 or w >= 1 << 32:
        raise ValueError(f"image dimensions {h}x{w} overflow the 32-bit header")
    return image


def _side_tables(model: TextGuidedCodec, precision: int, tail_mass: float,
                 spatial: int) -> CdfTable:
    per_channel = model.side_density.cdf_tables(precision, tail_mass)
    return tile_tables(per_channel, spatial)


@torch.no_grad()
def compress(
    model: TextGuidedCodec,
    image: torch.Tensor,
    caption: Optional[str] = None,
    coder: str = "ref",
    return_details: bool = False,
) -> bytes | tuple[bytes, CompressionDetails]:
    """Compress one image to container bytes.

    On adapter models an omitted caption falls back to the empty caption's
    embedding; models without an adapter reject captions outright.
    """
    was_training = model.training
    model.eval()
    try:
        image = _validate_image(image)
        orig_h, orig_w = int(image.shape[-2]), int(image.shape[-1])
        padded = pad_image(image, model.cfg.backbone.pad_multiple)
        x = padded.unsqueeze(0)

        text_tokens = None
        if model.adapter is not None:
            embedder = model.text_embedder
            if embedder is None:
                raise ConfigError(
                    "adapter model has no text embedder attached; call "
                    "attach_text_embedder() first"
                )
            text_tokens = embed_caption(embedder, caption or "").tokens.unsqueeze(0)
        elif caption is not None:
            raise ConfigError(
                "this model has no text adapter and cannot use a caption"
            )

        precision = model.cfg.entropy.cdf_precision
        tail_mass = model.cfg.entropy.tail_mass

        y = model.encode(x, text_tokens)
        z = model.hyper_analysis(y)

        z_table = _side_tables(model, precision, tail_mass,
                               z.shape[-2] * z.shape[-1])
        z_rounded = quantize(z, "eval").symbols
        z_symbols = clamp_symbols(z_rounded.numpy().astype(np.int64), z_table)
        z_hat = torch.from_numpy(
            z_symbols.astype(np.float32).reshape(z.shape)
        )

        means, scales = model.hyper_synthesis(z_hat)
        y_table = build_gaussian_tables(
            scales.numpy().reshape(-1),
            precision=precision,
            tail_mass=tail_mass,
            scale_min=model.cfg.entropy.scale_min,
            scale_max=model.cfg.entropy.scale_max,
        )
        y_rounded = quantize(y, "eval", means).symbols
        y_symbols = clamp_symbols(y_rounded.numpy().astype(np.int64), y_table)
        y_hat = torch.from_numpy(
            y_symbols.astype(np.float32).reshape(y.shape)
        ) + means

        z_stream = _encode_stream(z_symbols, z_table, coder)
        y_stream = _encode_stream(y_symbols, y_table, coder)

        header = container_lib.ContainerHeader(
            coder_id=CODER_NAMES[coder],
            model_id=model.model_id(),
            lambda_tag=lambda_to_tag(model.cfg.loss.lam),
            original_height=orig_h,
            original_width=orig_w,
            padded_height=int(padded.shape[-2]),
            padded_width=int(padded.shape[-1]),
            cdf_precision=precision,
            tail_mass=tail_mass,
            stream_lengths=(len(z_stream), len(y_stream)),
        )
        blob = container_lib.write_container(header, [z_stream, y_stream])

        if not return_details:
            return blob
        # Information content of the coded symbols under the exact integer
        # distributions the entropy coder used; the stream lengths should
        # exceed this only by the per-stream flush overhead.
        estimated_bits = float(
            -np.log2(y_table.implied_probabilities(y_symbols)).sum()
            - np.log2(z_table.implied_probabilities(z_symbols)).sum()
        )
        details = CompressionDetails(
            y_symbols=y_symbols,
            z_symbols=z_symbols,
            y_hat=y_hat,
            z_hat=z_hat,
            estimated_bits=estimated_bits,
            num_pixels=orig_h * orig_w,
        )
        return blob, details
    finally:
        if was_training:
            model.train()


@dataclass
class DecompressionDetails:
    """Side products of one decompress call (for bit-exactness checks)."""

    y_symbols: np.ndarray
    z_symbols: np.ndarray
    header: Any


@torch.no_grad()
def decompress(
    model: TextGuidedCodec,
    blob: bytes,
    return_details: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, DecompressionDetails]:
    """Decode container bytes back to a (3, H, W) image in [0, 1]."""
    was_training = model.training
    model.eval()
    try:
        header, streams = container_lib.read_container(blob)
        if header.model_id != model.model_id():
            raise ModelMismatchError(
                "bitstream was written by different model weights "
                f"(stream {header.model_id.hex()}, loaded {model.model_id().hex()})"
            )
        if len(streams) != 2:
            raise CodingError(
                f"expected 2 streams (z, y), container has {len(streams)}"
            )

        bb = model.cfg.backbone
        factor = bb.downsample_factor
        y_h = header.padded_height // factor
        y_w = header.padded_width // factor
        z_h, z_w = y_h // 4, y_w // 4

        z_table = _side_tables(model, header.cdf_precision, header.tail_mass,
                               z_h * z_w)
        z_symbols = _decode_stream(streams[0], z_table, header.coder_id)
        z_hat = torch.from_numpy(
            z_symbols.astype(np.float32).reshape(1, bb.hyper_channels, z_h, z_w)
        )

        means, scales = model.hyper_synthesis(z_hat)
        y_table = build_gaussian_tables(
            scales.numpy().reshape(-1),
            precision=header.cdf_precision,
            tail_mass=header.tail_mass,
            scale_min=model.cfg.entropy.scale_min,
            scale_max=model.cfg.entropy.scale_max,
        )
        y_symbols = _decode_stream(streams[1], y_table, header.coder_id)
        y_hat = torch.from_numpy(
            y_symbols.astype(np.float32).reshape(1, bb.latent_channels, y_h, y_w)
        ) + means

        x_hat = model.decode(y_hat)[0]
        x_hat = x_hat[:, : header.original_height, : header.original_width]
        if not return_details:
            return x_hat
        return x_hat, DecompressionDetails(
            y_symbols=y_symbols, z_symbols=z_symbols, header=header
        )
    finally:
        if was_training:
            model.train()
