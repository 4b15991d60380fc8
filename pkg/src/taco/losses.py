"""The training objective and the providers it depends on.

total = rate + lambda * MSE + k_p * perceptual + k_j * (contrastive + beta * embed_dist)

The perceptual distance and the image/text embedding towers come from
pluggable providers: pretrained networks when available, deterministic
offline stubs otherwise.  All stubs are frozen at construction and follow the
same aggregation recipes as their pretrained counterparts, so loss shapes and
gradients behave equivalently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import EmbeddingConfig, LossWeights, PerceptualConfig
from .errors import ConfigError, NumericError, ProviderUnavailableError, ShapeError
from .text_embedding import StubTextEmbedder


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all elements."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return torch.mean((x - x_hat) ** 2)


# ---------------------------------------------------------------------------
# perceptual distance


def _normalized_feature_distance(feats_a: Sequence[torch.Tensor],
                                 feats_b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Channel-unit-normalize each feature map, sum squared differences over
    channels, average spatially, and add up the layers (unit layer weights)."""
    total = None
    for fa, fb in zip(feats_a, feats_b):
        na = fa / (fa.square().sum(dim=1, keepdim=True).sqrt() + 1e-10)
        nb = fb / (fb.square().sum(dim=1, keepdim=True).sqrt() + 1e-10)
        layer = (na - nb).square().sum(dim=1).mean()
        total = layer if total is None else total + layer
    assert total is not None
    return total


class StubPerceptualProvider(nn.Module):
    """Fixed random convolutional feature stack for offline perceptual loss.

    Four taps: an affine 1x1 projection of the pixels followed by three
    strided 5x5 conv+ReLU stages.  The pixel tap is compared without channel
    normalization and with deliberately large weights, so the distance stays
    strongly sensitive to absolute intensity (normalization would discard
    it); the deeper taps are channel-normalized as usual.  Weights are drawn
    once from a fixed seed and frozen.
    """

    name = "stub"

    def __init__(self, seed: int = 7) -> None:
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.pixel_proj = nn.Conv2d(3, 16, 1)
            nn.init.normal_(self.pixel_proj.weight, std=8.0)
            nn.init.normal_(self.pixel_proj.bias, std=0.5)
            self.stage1 = nn.Conv2d(3, 32, 5, stride=2, padding=2)
            self.stage2 = nn.Conv2d(32, 64, 5, stride=2, padding=2)
            self.stage3 = nn.Conv2d(64, 96, 5, stride=2, padding=2)
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = F.relu(self.stage1(x))
        f2 = F.relu(self.stage2(f1))
        f3 = F.relu(self.stage3(f2))
        return [f1, f2, f3]

    def forward(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        pixel = (self.pixel_proj(x) - self.pixel_proj(x_hat)).square() \
            .sum(dim=1).mean()
        return pixel + _normalized_feature_distance(self.features(x),
                                                    self.features(x_hat))


class AlexNetPerceptualProvider(nn.Module):
    """Perceptual distance over pretrained AlexNet ReLU features.

    Uses unit layer weights over the five classic taps (no learned linear
    heads).  Needs torchvision and downloadable weights.
    """

    name = "alexnet"
    _TAPS = (1, 4, 7, 9, 11)  # indices of the ReLU outputs in .features

    def __init__(self) -> None:
        super().__init__()
        try:
            from torchvision.models import AlexNet_Weights, alexnet
        except ImportError as exc:
            raise ProviderUnavailableError(
                "the pretrained perceptual provider needs 'torchvision'"
            ) from exc
        try:
            net = alexnet(weights=AlexNet_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ProviderUnavailableError(
                f"could not load pretrained AlexNet weights: {exc}"
            ) from exc
        self.stack = net.features
        self.register_buffer("shift", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = (x - self.shift) / self.scale
        out = []
        for i, layer in enumerate(self.stack):
            h = layer(h)
            if i in self._TAPS:
                out.append(h)
        return out

    def forward(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        return _normalized_feature_distance(self.features(x), self.features(x_hat))


def build_perceptual_provider(cfg: PerceptualConfig) -> nn.Module:
    if cfg.provider == "stub":
        return StubPerceptualProvider()
    if cfg.provider == "alexnet":
        return AlexNetPerceptualProvider()
    raise ConfigError(f"unknown perceptual provider {cfg.provider!r}")


def perceptual_distance(provider: nn.Module, x: torch.Tensor,
                        x_hat: torch.Tensor) -> torch.Tensor:
    """Provider-defined distance; nonnegative, zero at identical inputs."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    return provider(x, x_hat)


# ---------------------------------------------------------------------------
# joint image-text loss


def contrastive_loss(img_embs: torch.Tensor, txt_embs: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over cosine-similarity logits; diagonal = positives."""
    if img_embs.dim() != 2 or txt_embs.dim() != 2:
        raise ShapeError("embedding batches must be 2-D (batch, dim)")
    if img_embs.shape != txt_embs.shape:
        raise ShapeError(
            f"batch mismatch: {tuple(img_embs.shape)} vs {tuple(txt_embs.shape)}"
        )
    batch = img_embs.shape[0]
    if batch == 0:
        raise ValueError("contrastive loss needs a nonempty batch")
    img_n = F.normalize(img_embs, dim=1, eps=1e-12)
    txt_n = F.normalize(txt_embs, dim=1, eps=1e-12)
    logits = img_n @ txt_n.t() / temperature
    targets = torch.arange(batch, device=logits.device)
    image_to_text = F.cross_entropy(logits, targets)
    text_to_image = F.cross_entropy(logits.t(), targets)
    return (image_to_text + text_to_image) / 2


def embedding_distance(f_x: torch.Tensor, f_x_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-pair L2 distances."""
    if f_x.shape != f_x_hat.shape:
        raise ShapeError(
            f"embedding shape mismatch: {tuple(f_x.shape)} vs {tuple(f_x_hat.shape)}"
        )
    return (f_x - f_x_hat).norm(dim=-1).mean()


def joint_image_text_loss(
    f_i_x: torch.Tensor,
    f_i_x_hat: torch.Tensor,
    f_t_c: torch.Tensor,
    beta: float,
    temperature: float,
) -> torch.Tensor:
    """Contrastive alignment of (reconstruction, caption) pairs plus beta times
    the embedding drift between original and reconstruction."""
    return (contrastive_loss(f_i_x_hat, f_t_c, temperature)
            + beta * embedding_distance(f_i_x, f_i_x_hat))


# ---------------------------------------------------------------------------
# total objective


@dataclass
class LossBreakdown:
    """One training step's loss components (tensors during training)."""

    rate_bpp: torch.Tensor | float
    mse: torch.Tensor | float
    lpips: torch.Tensor | float
    contrastive: torch.Tensor | float
    embed_dist: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> "LossBreakdown":
        def to_float(value):
            return float(value.detach()) if torch.is_tensor(value) else float(value)

        return LossBreakdown(*(to_float(getattr(self, f.name))
                               for f in self.__dataclass_fields__.values()))


def _check_finite(name: str, value: torch.Tensor | float) -> None:
    if torch.is_tensor(value):
        bad = bool(torch.isnan(value).any())
    else:
        bad = math.isnan(value)
    if bad:
        raise NumericError(f"loss term {name!r} is NaN")


def total_loss(
    rate_bpp: torch.Tensor | float,
    mse_value: torch.Tensor | float,
    lpips_value: torch.Tensor | float,
    joint_value: torch.Tensor | float,
    weights: LossWeights,
    contrastive: Optional[torch.Tensor | float] = None,
    embed_dist: Optional[torch.Tensor | float] = None,
) -> LossBreakdown:
    """Weighted sum of the four terms, with a component record.

    If the joint term's split is supplied it is recorded as-is; otherwise the
    whole joint value is filed under ``contrastive`` with zero ``embed_dist``
    (the breakdown identity holds either way).
    """
    for name, value in (("rate_bpp", rate_bpp), ("mse", mse_value),
                        ("lpips", lpips_value), ("joint", joint_value)):
        _check_finite(name, value)
    total = (rate_bpp
             + weights.lam * mse_value
             + weights.k_p * lpips_value
             + weights.k_j * joint_value)
    if contrastive is None or embed_dist is None:
        contrastive, embed_dist = joint_value, 0.0
    return LossBreakdown(
        rate_bpp=rate_bpp,
        mse=mse_value,
        lpips=lpips_value,
        contrastive=contrastive,
        embed_dist=embed_dist,
        total=total,
    )


# ---------------------------------------------------------------------------
# embedding towers for the joint loss


class StubJointEmbeddingProvider(nn.Module):
    """Frozen random image/text towers producing unit 512-dim embeddings.

    Image tower: bilinear resize to 64x64, three strided conv+ReLU stages,
    global average pooling, linear head, L2 normalization.  Text tower: mean
    over the caption's valid token rows (deterministic offline token vectors)
    followed by a linear head and L2 normalization.  Deterministic given the
    seed; differentiable w.r.t. the image input so reconstruction gradients
    flow.
    """

    name = "stub"
    input_resolution = 64
    embed_dim = 512

    def __init__(self, seed: int = 11, text_dim: int = 512) -> None:
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.image_stack = nn.Sequential(
                nn.Conv2d(3, 32, 5, stride=2, padding=2), nn.ReLU(inplace=True),
                nn.Conv2d(32, 64, 5, stride=2, padding=2), nn.ReLU(inplace=True),
                nn.Conv2d(64, 128, 5, stride=2, padding=2), nn.ReLU(inplace=True),
            )
            self.image_head = nn.Linear(128, self.embed_dim)
            self.text_head = nn.Linear(text_dim, self.embed_dim)
        self._tokenizer = StubTextEmbedder()
        self.requires_grad_(False)
        self.eval()

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        resized = F.interpolate(images, size=self.input_resolution,
                                mode="bilinear", align_corners=False)
        pooled = self.image_stack(resized).mean(dim=(2, 3))
        return F.normalize(self.image_head(pooled), dim=1, eps=1e-12)

    def embed_texts(self, captions: Sequence[str]) -> torch.Tensor:
        rows = []
        for caption in captions:
            emb = self._tokenizer.embed(caption)
            rows.append(emb.tokens[: emb.valid_length].mean(dim=0))
        return F.normalize(self.text_head(torch.stack(rows)), dim=1, eps=1e-12)


class ClipJointEmbeddingProvider(nn.Module):
    """Pretrained CLIP image/text towers for the joint loss."""

    name = "pretrained_clip_text"
    input_resolution = 224
    embed_dim = 512

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32") -> None:
        super().__init__()
        try:
            from transformers import AutoTokenizer, CLIPModel
        except ImportError as exc:
            raise ProviderUnavailableError(
                "the pretrained joint-embedding provider needs 'transformers'"
            ) from exc
        try:
            self.clip = CLIPModel.from_pretrained(model_name)
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        except Exception as exc:
            raise ProviderUnavailableError(
                f"could not load pretrained towers {model_name!r}: {exc}"
            ) from exc
        self.register_buffer(
            "shift",
            torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1),
        )
        self.register_buffer(
            "scale",
            torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1),
        )
        self.requires_grad_(False)
        self.eval()

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        resized = F.interpolate(images, size=self.input_resolution,
                                mode="bilinear", align_corners=False)
        feats = self.clip.get_image_features(pixel_values=(resized - self.shift) / self.scale)
        return F.normalize(feats, dim=1, eps=1e-12)

    def embed_texts(self, captions: Sequence[str]) -> torch.Tensor:
        enc = self.tokenizer(list(captions), padding=True, truncation=True,
                             return_tensors="pt")
        feats = self.clip.get_text_features(**enc)
        return F.normalize(feats, dim=1, eps=1e-12)


def build_joint_embedding_provider(cfg: EmbeddingConfig) -> nn.Module:
    if cfg.provider == "stub":
        return StubJointEmbeddingProvider()
    if cfg.provider == "pretrained_clip_text":
        return ClipJointEmbeddingProvider(cfg.model_name)
    raise ConfigError(f"unknown embedding provider {cfg.provider!r}")
