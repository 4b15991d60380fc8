"""Dataset handling, the LR schedule, and the training loop.

The dataset is a JSONL manifest, one image per line with its caption list.
Training samples fixed-size crops, picks one caption per image uniformly,
and optimizes the combined rate/distortion/perceptual/joint objective with a
step-decay schedule.  Checkpoints are resumable (optimizer and sampler state
included) and every step appends a row to a metrics CSV.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .config import CodecConfig, TrainConfig, replace
from .errors import ConfigError, DatasetError, NumericError, TrainingDivergedError
from .losses import (
    LossBreakdown,
    build_joint_embedding_provider,
    build_perceptual_provider,
    contrastive_loss,
    embedding_distance,
    mse,
    perceptual_distance,
    total_loss,
)
from .entropy import rate_bpp
from .model import TextGuidedCodec, load_checkpoint, save_checkpoint
from .text_embedding import build_text_embedder, stack_embeddings

METRICS_COLUMNS = ("step", "epoch", "lr", "rate_bpp", "mse", "lpips",
                   "contrastive", "embed_dist", "total")


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    captions: tuple[str, ...]


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a JSONL manifest of ``{"image_path": ..., "captions": [...]}``.

    Paths are resolved relative to the manifest's directory.  A malformed
    line or a missing image file raises ``DatasetError`` naming the line.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"manifest line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict) or "image_path" not in record \
                    or "captions" not in record:
                raise DatasetError(
                    f"manifest line {lineno}: expected an object with "
                    f"'image_path' and 'captions'"
                )
            captions = record["captions"]
            if not isinstance(captions, list) \
                    or not all(isinstance(c, str) for c in captions):
                raise DatasetError(
                    f"manifest line {lineno}: 'captions' must be a list of strings"
                )
            image_path = Path(record["image_path"])
            if not image_path.is_absolute():
                image_path = root / image_path
            if not image_path.is_file():
                raise DatasetError(
                    f"manifest line {lineno}: image not found: {image_path}"
                )
            entries.append(ManifestEntry(image_path, tuple(captions)))
    if not entries:
        raise DatasetError(f"manifest is empty: {path}")
    return entries


@lru_cache(maxsize=32)
def _load_image_array(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


@dataclass
class TrainingBatch:
    images: torch.Tensor        # (B, 3, S, S) float in [0, 1]
    captions: list[str]         # one sampled caption per image ("" if none)


def sample_batch(entries: Sequence[ManifestEntry], config: TrainConfig,
                 rng: np.random.Generator) -> TrainingBatch:
    """Draw a batch of random square crops with one caption each.

    Entries are sampled uniformly with replacement.  Images whose short side
    is below the crop size are upscaled (aspect preserved) until it fits.
    """
    if not entries:
        raise DatasetError("cannot sample from an empty entry list")
    crop = config.crop_size
    images, captions = [], []
    for idx in rng.integers(len(entries), size=config.batch_size):
        entry = entries[int(idx)]
        arr = _load_image_array(str(entry.image_path))
        h, w = arr.shape[:2]
        if min(h, w) < crop:
            scale = crop / min(h, w)
            new_w = max(crop, round(w * scale))
            new_h = max(crop, round(h * scale))
            resized = Image.fromarray(arr).resize((new_w, new_h), Image.BILINEAR)
            arr = np.asarray(resized, dtype=np.uint8)
            h, w = arr.shape[:2]
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        patch = arr[top:top + crop, left:left + crop]
        images.append(torch.from_numpy(patch.copy()).permute(2, 0, 1).float() / 255.0)
        if entry.captions:
            captions.append(entry.captions[int(rng.integers(len(entry.captions)))])
        else:
            captions.append("")
    return TrainingBatch(torch.stack(images), captions)


# ---------------------------------------------------------------------------
# schedule and ablations


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Step-decay schedule: the base rate times ``factor`` once per decay
    boundary already reached."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(
            f"epoch {epoch} outside the configured range [0, {config.epochs})"
        )
    decays = sum(1 for boundary in config.lr_decay_epochs if boundary <= epoch)
    return config.learning_rate * config.lr_decay_factor ** decays


def apply_ablation(cfg: CodecConfig, ablation: str) -> CodecConfig:
    """Return the codec configuration with the requested ablation applied.

    ``no_adapter`` removes the text adapter, ``no_joint_loss`` zeroes the
    joint weight, ``frozen_backbone`` leaves the configuration alone (the
    trainer freezes parameters instead), ``full`` is the identity.
    """
    if ablation == "full":
        return cfg
    if ablation == "no_adapter":
        return replace(cfg, adapter=replace(cfg.adapter, enabled=False))
    if ablation == "no_joint_loss":
        return replace(cfg, loss=replace(cfg.loss, k_j=0.0))
    if ablation == "frozen_backbone":
        if not cfg.adapter.enabled:
            raise ConfigError(
                "the frozen_backbone ablation trains only the adapter, "
                "which is disabled in this configuration"
            )
        return cfg
    raise ConfigError(f"unknown ablation {ablation!r}")


def _trainable_parameters(model: TextGuidedCodec, ablation: str):
    if ablation == "frozen_backbone":
        for name, module in model.named_children():
            module.requires_grad_(name == "adapter")
    return [p for p in model.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# steps


def train_step(
    model: TextGuidedCodec,
    batch: TrainingBatch,
    optimizer: torch.optim.Optimizer,
    perceptual: torch.nn.Module,
    joint_provider: Optional[torch.nn.Module],
    grad_clip: float = 1.0,
) -> LossBreakdown:
    """Run one optimization step and return the loss components as floats.

    A NaN in any loss term aborts with ``TrainingDivergedError`` naming it.
    """
    weights = model.cfg.loss
    x = batch.images
    if model.cfg.adapter.enabled:
        embedder = model.text_embedder
        tokens = stack_embeddings([embedder.embed(c) for c in batch.captions])
    else:
        tokens = None

    try:
        out = model(x, tokens)
        x_hat = out["x_hat"]
        num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
        rate = (rate_bpp(out["likelihoods"]["y"], num_pixels)
                + rate_bpp(out["likelihoods"]["z"], num_pixels))
        distortion = mse(x, x_hat)
        lpips_value = perceptual_distance(perceptual, x, x_hat)

        if joint_provider is not None and weights.k_j > 0:
            f_x = joint_provider.embed_images(x)
            f_x_hat = joint_provider.embed_images(x_hat)
            f_text = joint_provider.embed_texts(batch.captions)
            contrast = contrastive_loss(f_x_hat, f_text, weights.temperature)
            drift = embedding_distance(f_x, f_x_hat)
            joint = contrast + weights.beta * drift
        else:
            contrast = torch.zeros(())
            drift = torch.zeros(())
            joint = torch.zeros(())

        breakdown = total_loss(rate, distortion, lpips_value, joint, weights,
                               contrastive=contrast, embed_dist=drift)
    except NumericError as exc:
        raise TrainingDivergedError(f"aborting training step: {exc}") from exc

    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            (p for group in optimizer.param_groups for p in group["params"]),
            grad_clip,
        )
    optimizer.step()
    return breakdown.as_floats()


# ---------------------------------------------------------------------------
# the loop


def _truncate_metrics(metrics_path: Path, steps: int) -> None:
    """Drop metrics rows past the checkpointed step (a crash between a step
    and its checkpoint leaves orphans that a resumed run would redo)."""
    if not metrics_path.is_file():
        return
    with open(metrics_path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[: 1 + steps]
    if len(keep) < len(rows):
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)


@dataclass
class FitResult:
    model: TextGuidedCodec
    steps: int
    metrics_path: Path
    checkpoint_path: Path
    history: list[LossBreakdown] = field(default_factory=list)


def fit(
    codec_cfg: CodecConfig,
    train_cfg: TrainConfig,
    entries: Sequence[ManifestEntry],
    out_dir: str | Path,
    resume: bool = True,
    step_callback: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> FitResult:
    """Train a codec on the manifest entries, checkpointing as configured.

    ``out_dir`` receives ``latest.pt`` (every ``checkpoint_every`` epochs and
    at the end), per-epoch snapshots, and ``metrics.csv`` with one row per
    optimization step.  With ``resume`` the loop picks up from ``latest.pt``
    if present, including optimizer and batch-sampler state, so interrupted
    and straight-through runs produce the same step count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec_cfg = apply_ablation(codec_cfg, train_cfg.ablation)
    multiple = codec_cfg.backbone.pad_multiple
    if train_cfg.crop_size % multiple:
        raise ConfigError(
            f"crop size {train_cfg.crop_size} must be a multiple of "
            f"{multiple} (backbone stride times hyper stride)"
        )

    steps_per_epoch = train_cfg.steps_per_epoch
    if steps_per_epoch <= 0:
        steps_per_epoch = max(1, math.ceil(len(entries) / train_cfg.batch_size))

    latest = out_dir / "latest.pt"
    metrics_path = out_dir / "metrics.csv"
    rng = np.random.default_rng(train_cfg.seed)
    start_epoch = 0
    global_step = 0

    if resume and latest.is_file():
        model, payload = load_checkpoint(latest)
        if payload["model_config"] != codec_cfg.to_dict():
            raise ConfigError(
                "checkpoint configuration does not match the requested one; "
                "use a fresh output directory"
            )
        start_epoch = payload["epoch"] + 1
        global_step = payload["global_step"]
        rng.bit_generator.state = payload["sampler_state"]
        if "torch_rng" in payload:
            torch.random.set_rng_state(payload["torch_rng"])
        _truncate_metrics(metrics_path, global_step)
    else:
        # seed the noise-injection RNG so a run is a pure function of its
        # configs, and an interrupted run can replay the remainder exactly
        torch.manual_seed(train_cfg.seed)
        model = TextGuidedCodec(codec_cfg)
        payload = None
        if metrics_path.exists():
            metrics_path.unlink()

    if codec_cfg.adapter.enabled:
        model.attach_text_embedder(build_text_embedder(
            codec_cfg.embedding.provider, codec_cfg.embedding.model_name))
    model.train()

    perceptual = build_perceptual_provider(codec_cfg.perceptual)
    joint_provider = (build_joint_embedding_provider(codec_cfg.embedding)
                      if codec_cfg.loss.k_j > 0 else None)

    params = _trainable_parameters(model, train_cfg.ablation)
    if not params:
        raise ConfigError("no trainable parameters under this ablation")
    optimizer = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    if payload is not None:
        optimizer.load_state_dict(payload["optimizer"])

    history: list[LossBreakdown] = []
    write_header = not metrics_path.exists()
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRICS_COLUMNS)
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = lr_at_epoch(epoch, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for _ in range(steps_per_epoch):
                batch = sample_batch(entries, train_cfg, rng)
                breakdown = train_step(model, batch, optimizer, perceptual,
                                       joint_provider)
                global_step += 1
                history.append(breakdown)
                writer.writerow([global_step, epoch, f"{lr:.8g}",
                                 *(f"{getattr(breakdown, c):.8g}"
                                   for c in METRICS_COLUMNS[3:])])
                if step_callback is not None:
                    step_callback(global_step, breakdown)
            fh.flush()
            last_epoch = epoch == train_cfg.epochs - 1
            if last_epoch or (epoch + 1) % train_cfg.checkpoint_every == 0:
                extra = {
                    "epoch": epoch,
                    "global_step": global_step,
                    "optimizer": optimizer.state_dict(),
                    "sampler_state": rng.bit_generator.state,
                    "torch_rng": torch.random.get_rng_state(),
                    "train_config": train_cfg.to_dict(),
                }
                save_checkpoint(model, latest, extra=extra)
                save_checkpoint(model, out_dir / f"epoch_{epoch:04d}.pt",
                                extra=extra)

    model.eval()
    return FitResult(model=model, steps=global_step, metrics_path=metrics_path,
                     checkpoint_path=latest, history=history)
