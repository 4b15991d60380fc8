"""Shared fixtures: tiny deterministic models, images, and datasets.

Test models shrink every width while keeping the architecture intact
(channels stay divisible by the attention head count), so structural
behavior matches the full-size configuration at a fraction of the cost.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from taco.config import (
    AdapterConfig,
    BackboneConfig,
    CodecConfig,
    LossWeights,
    TrainConfig,
)
from taco.model import TextGuidedCodec, ensure_text_embedder


def tiny_codec_config(adapter: bool = True, seed: int = 5,
                      lam: float = 0.004) -> CodecConfig:
    return CodecConfig(
        backbone=BackboneConfig(
            base_channels=32,
            latent_channels=48,
            hyper_channels=24,
            blocks_per_stage=1,
        ),
        adapter=AdapterConfig(enabled=adapter),
        loss=LossWeights(lam=lam),
        seed=seed,
    )


def overfit_train_config(seed: int = 5) -> TrainConfig:
    """The 500-step schedule used for the overfitting check."""
    return TrainConfig(
        epochs=10,
        batch_size=8,
        crop_size=64,
        learning_rate=2e-3,
        lr_decay_epochs=(8, 9),
        lr_decay_factor=0.25,
        steps_per_epoch=50,
        checkpoint_every=100,
        seed=seed,
    )


@pytest.fixture(scope="session")
def toy_model() -> TextGuidedCodec:
    return ensure_text_embedder(TextGuidedCodec(tiny_codec_config(adapter=True)))


@pytest.fixture(scope="session")
def toy_model_plain() -> TextGuidedCodec:
    return TextGuidedCodec(tiny_codec_config(adapter=False))


@pytest.fixture()
def toy_image() -> torch.Tensor:
    torch.manual_seed(0)
    return torch.rand(3, 96, 128)


def make_structured_image(index: int, size: int = 64) -> np.ndarray:
    """Deterministic compressible RGB test patterns as uint8 arrays."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    n = size - 1
    img = np.zeros((size, size, 3))
    kind = index % 8
    if kind == 0:
        img[..., 0] = xx / n
        img[..., 1] = yy / n
        img[..., 2] = 0.5
    elif kind == 1:
        img[..., 1] = (xx // 8 + yy // 8) % 2
        img[..., 2] = 0.7
    elif kind == 2:
        img[..., 0] = np.sin(xx / 5) ** 2
        img[..., 1] = np.cos(yy / 7) ** 2
    elif kind == 3:
        r = np.hypot(xx - size / 2, yy - size / 2)
        img[..., 2] = (np.sin(r / 4) + 1) / 2
        img[..., 0] = 0.6
    elif kind == 4:
        img[..., 0] = ((xx + yy) % 32) / 31
        img[..., 1] = 0.4
    elif kind == 5:
        img[..., 1] = np.exp(-((xx - size * 0.3) ** 2 + (yy - size * 0.6) ** 2)
                             / (size * 3))
        img[..., 2] = np.exp(-((xx - size * 0.7) ** 2 + (yy - size * 0.25) ** 2)
                             / (size * 5))
    elif kind == 6:
        img[..., 0] = (xx % 16 < 8) * 0.8
        img[..., 2] = yy / n
    else:
        img[..., 0] = 0.2 + 0.6 * yy / n
        img[..., 1] = 0.8 - 0.6 * xx / n
        img[..., 2] = ((xx // 16 + yy // 16) % 2) * 0.5
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


TOY_CAPTIONS = (
    "red and green corner gradient",
    "green checkerboard on blue",
    "sine stripes in red and green",
    "blue rings around the center",
    "diagonal red ramp bands",
    "two soft colored blobs",
    "red bars over a blue ramp",
    "color wash with faint checker",
)


def write_toy_dataset(root: Path, count: int = 8, size: int = 64) -> Path:
    """Create images plus a JSONL manifest; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(count):
            path = root / f"img{i}.png"
            Image.fromarray(make_structured_image(i, size)).save(path)
            entry = {"image_path": path.name,
                     "captions": [TOY_CAPTIONS[i % len(TOY_CAPTIONS)]]}
            fh.write(json.dumps(entry) + "\n")
    return manifest


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> Path:
    return write_toy_dataset(tmp_path_factory.mktemp("toyds"))
