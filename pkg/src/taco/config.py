"""Configuration dataclasses and YAML loading.

A single :class:`CodecConfig` describes everything needed to build a model:
backbone geometry, text-adapter layout, entropy-model constants, loss weights,
and which embedding / perceptual providers to use.  Training adds a
:class:`TrainConfig` on top.  All defaults reproduce the published operating
point; the YAML schema mirrors the dataclass fields (the rate weight is
spelled ``lambda`` in YAML and ``lam`` in code).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

#: Rate-distortion weights used for the published rate points, ascending.
LAMBDA_GRID: tuple[float, ...] = (0.0004, 0.0008, 0.0016, 0.004, 0.009, 0.015)

#: Header tag meaning "trained with a rate weight outside the standard grid".
LAMBDA_TAG_CUSTOM = 0xFFFF


def lambda_to_tag(lam: float) -> int:
    """Grid index of a rate weight for bitstream headers (0xFFFF if off-grid)."""
    for index, value in enumerate(LAMBDA_GRID):
        if math.isclose(lam, value, rel_tol=1e-9):
            return index
    return LAMBDA_TAG_CUSTOM


def tag_to_lambda(tag: int) -> float | None:
    """Rate weight for a header tag; None for the off-grid sentinel."""
    if tag == LAMBDA_TAG_CUSTOM:
        return None
    if not 0 <= tag < len(LAMBDA_GRID):
        raise ConfigError(f"lambda tag {tag} outside the known grid")
    return LAMBDA_GRID[tag]


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry of the convolutional analysis/synthesis transforms."""

    image_channels: int = 3
    base_channels: int = 192  # width of the intermediate stages
    latent_channels: int = 320  # width of the coded representation y
    hyper_channels: int = 192  # width of the side-information latent z
    num_stages: int = 4  # stride-2 stages; total downsampling 2**num_stages
    blocks_per_stage: int = 3  # residual bottleneck blocks per stage
    attention_stages: tuple[int, ...] = (2, 4)  # 1-based stages ending in attention

    @property
    def downsample_factor(self) -> int:
        return 2**self.num_stages

    @property
    def pad_multiple(self) -> int:
        # z is downsampled twice more than y, so coded images are padded to
        # 4x the y stride to keep every stage's size even.
        return self.downsample_factor * 4

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ConfigError("num_stages must be at least 2")
        for ch in (self.base_channels, self.latent_channels, self.hyper_channels):
            if ch <= 0 or ch % 2:
                raise ConfigError("channel widths must be positive and even")
        for s in self.attention_stages:
            if not 1 <= s <= self.num_stages:
                raise ConfigError(f"attention stage {s} outside 1..{self.num_stages}")


@dataclass(frozen=True)
class AdapterConfig:
    """Layout of the text adapter that conditions the encoder on captions."""

    enabled: bool = True
    text_dim: int = 512
    token_length: int = 38
    num_heads: int = 8
    # 1-based encoder stages whose outputs the adapter taps, in order:
    # text-to-image, image-to-text, then updated-text-to-image.
    tap_stages: tuple[int, int, int] = (2, 3, 4)

    def validate(self, backbone: BackboneConfig) -> None:
        if len(self.tap_stages) != 3:
            raise ConfigError("tap_stages must name exactly three encoder stages")
        if not all(1 <= s <= backbone.num_stages for s in self.tap_stages):
            raise ConfigError("tap_stages outside the encoder's stage range")
        if not (self.tap_stages[0] < self.tap_stages[1] < self.tap_stages[2]):
            raise ConfigError("tap_stages must be strictly increasing")
        if self.text_dim % self.num_heads:
            raise ConfigError("text_dim must be divisible by num_heads")


@dataclass(frozen=True)
class EntropyConfig:
    """Constants of the entropy models and their integer code tables."""

    cdf_precision: int = 16  # CDF tables sum to 2**cdf_precision
    tail_mass: float = 1e-6  # probability mass allowed outside the coded range
    scale_min: float = 0.11  # lower clamp on predicted Gaussian scales
    scale_max: float = 256.0  # upper clamp, bounds table width
    likelihood_floor: float = 1e-9  # lower clamp inside the rate estimate
    density_filters: tuple[int, ...] = (3, 3, 3)  # hidden widths of the z density
    density_init_scale: float = 10.0

    def validate(self) -> None:
        if not 12 <= self.cdf_precision <= 16:
            raise ConfigError("cdf_precision must lie in 12..16")
        if not 0 < self.tail_mass < 1:
            raise ConfigError("tail_mass must lie in (0, 1)")
        if self.scale_min <= 0:
            raise ConfigError("scale_min must be positive")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the training objective (``lambda`` in YAML is ``lam`` here)."""

    lam: float = 0.004  # rate-distortion trade-off weight on MSE
    k_p: float = 3.5  # weight on the perceptual term
    k_j: float = 0.0025  # weight on the joint image-text term
    beta: float = 40.0  # weight on the embedding-distance part of the joint term
    temperature: float = 0.07  # fixed contrastive temperature

    def validate(self) -> None:
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Caption/embedding provider selection.

    ``stub`` is a deterministic, dependency-free stand-in that keeps the
    pipeline runnable offline; ``pretrained_clip_text`` loads the real frozen
    text tower and raises when its weights cannot be fetched.  The same choice
    governs the image/text towers of the joint loss.
    """

    provider: str = "stub"  # "stub" | "pretrained_clip_text"
    model_name: str = "openai/clip-vit-base-patch32"

    def validate(self) -> None:
        if self.provider not in ("stub", "pretrained_clip_text"):
            raise ConfigError(
                f"unknown embedding provider {self.provider!r}; "
                "expected 'stub' or 'pretrained_clip_text'"
            )


@dataclass(frozen=True)
class PerceptualConfig:
    """Perceptual-distance provider: offline stub or pretrained AlexNet."""

    provider: str = "stub"  # "stub" | "alexnet"

    def validate(self) -> None:
        if self.provider not in ("stub", "alexnet"):
            raise ConfigError(
                f"unknown perceptual provider {self.provider!r}; "
                "expected 'stub' or 'alexnet'"
            )


@dataclass(frozen=True)
class CodecConfig:
    """Everything needed to instantiate a codec model."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        self.adapter.validate(self.backbone)
        self.entropy.validate()
        self.loss.validate()
        self.embedding.validate()
        self.perceptual.validate()

    def to_dict(self) -> dict[str, Any]:
        return _asdict_with_aliases(self)


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop hyperparameters."""

    epochs: int = 50
    batch_size: int = 4
    crop_size: int = 256
    learning_rate: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (45, 48)  # decay applies from these epochs on
    lr_decay_factor: float = 0.1
    steps_per_epoch: int = 0  # 0 means one pass over the manifest per epoch
    checkpoint_every: int = 1  # epochs between checkpoints
    ablation: str = "full"  # full | no_adapter | no_joint_loss | frozen_backbone
    seed: int = 0

    VALID_ABLATIONS = ("full", "no_adapter", "no_joint_loss", "frozen_backbone")

    def validate(self) -> None:
        if self.ablation not in self.VALID_ABLATIONS:
            raise ConfigError(
                f"unknown ablation {self.ablation!r}; expected one of "
                f"{', '.join(self.VALID_ABLATIONS)}"
            )
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.crop_size <= 0:
            raise ConfigError("crop_size must be positive")
        boundaries = self.lr_decay_epochs
        if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if any(not 0 < b < self.epochs for b in boundaries):
            raise ConfigError(
                f"lr_decay_epochs must lie strictly inside (0, {self.epochs})"
            )
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")

    def to_dict(self) -> dict[str, Any]:
        return _asdict_with_aliases(self)


# ---------------------------------------------------------------------------
# YAML plumbing


_ALIASES = {"lam": "lambda"}  # dataclass field name -> YAML key
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


def _asdict_with_aliases(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in dataclasses.fields(obj):
            key = _ALIASES.get(f.name, f.name)
            out[key] = _asdict_with_aliases(getattr(obj, f.name))
        return out
    if isinstance(obj, tuple):
        return [_asdict_with_aliases(v) for v in obj]
    return obj


def _build_dataclass(cls: type, data: Mapping[str, Any], context: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for raw_key, value in data.items():
        key = _REVERSE_ALIASES.get(raw_key, raw_key)
        if key not in fields:
            raise ConfigError(f"unknown key {raw_key!r} in {context}")
        f = fields[key]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.default_factory, type)
            and dataclasses.is_dataclass(f.default_factory)
        ):
            sub_cls = f.default_factory  # nested dataclass
            if not isinstance(value, Mapping):
                raise ConfigError(f"{context}.{raw_key} must be a mapping")
            kwargs[key] = _build_dataclass(sub_cls, value, f"{context}.{raw_key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def load_config(path: str | Path) -> tuple[CodecConfig, TrainConfig]:
    """Load a YAML file into codec and training configs, validating both.

    The file may contain top-level ``model`` and ``train`` mappings; either
    may be omitted, in which case defaults apply.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config file {path} must contain a mapping")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level keys in {path}: {sorted(unknown)}")
    codec = _build_dataclass(CodecConfig, raw.get("model", {}), "model")
    train = _build_dataclass(TrainConfig, raw.get("train", {}), "train")
    codec.validate()
    train.validate()
    return codec, train


def dump_config(codec: CodecConfig, train: TrainConfig | None = None) -> str:
    """Serialize configs back to YAML (inverse of :func:`load_config`)."""
    doc: dict[str, Any] = {"model": codec.to_dict()}
    if train is not None:
        doc["train"] = train.to_dict()
    return yaml.safe_dump(doc, sort_keys=False)


def codec_config_from_dict(data: Mapping[str, Any]) -> CodecConfig:
    """Rebuild a :class:`CodecConfig` from :meth:`CodecConfig.to_dict` output."""
    cfg = _build_dataclass(CodecConfig, data, "model")
    cfg.validate()
    return cfg


def replace(obj: Any, **changes: Any) -> Any:
    """Convenience re-export of :func:`dataclasses.replace`."""
    return dataclasses.replace(obj, **changes)
