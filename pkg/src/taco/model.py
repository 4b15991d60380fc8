"""The full codec model: backbone + hyperprior + optional text adapter.

Construction is deterministic given the config (weights are drawn from a
forked RNG seeded with ``cfg.seed``), so two processes building the same
config agree bit-for-bit — which the bitstream's model-identity check relies
on.  Checkpoints are versioned archives carrying the config, the weights, and
whatever the trainer wants to embed.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import torch
from torch import nn

from .backbone import AnalysisTransform, SynthesisTransform
from .config import CodecConfig, codec_config_from_dict
from .entropy import (
    FactorizedDensity,
    HyperAnalysis,
    HyperSynthesis,
    discrete_gaussian_likelihood,
    quantize,
    ste_round,
)
from .errors import ConfigError
from .text_adapter import TextAdapter

CHECKPOINT_FORMAT_VERSION = 1

PARAMETER_COMPONENTS = ("backbone", "adapter", "embedding_provider", "total")


class TextGuidedCodec(nn.Module):
    """Learned image codec whose encoder can condition on caption tokens."""

    def __init__(self, cfg: CodecConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            bb = cfg.backbone
            self.analysis = AnalysisTransform(bb)
            self.synthesis = SynthesisTransform(bb)
            self.hyper_analysis = HyperAnalysis(bb.latent_channels, bb.hyper_channels)
            self.hyper_synthesis = HyperSynthesis(
                bb.latent_channels, bb.hyper_channels, cfg.entropy.scale_min
            )
            self.side_density = FactorizedDensity(
                bb.hyper_channels,
                cfg.entropy.density_filters,
                cfg.entropy.density_init_scale,
            )
            self.adapter: Optional[TextAdapter] = (
                TextAdapter(cfg.adapter, self.analysis.stage_channels)
                if cfg.adapter.enabled
                else None
            )
        self._text_embedder = None

    # ------------------------------------------------------------------
    # inference paths

    def encode(self, x: torch.Tensor,
               text_tokens: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Image batch -> latent y; caption tokens activate the adapter taps."""
        tap = None
        if text_tokens is not None:
            if self.adapter is None:
                raise ConfigError(
                    "caption supplied but this model was built without a text adapter"
                )
            tap = self.adapter.make_tap(text_tokens)
        return self.analysis(x, tap)

    def decode(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Latent -> image batch, clamped to [0, 1]."""
        return self.synthesis(y_hat).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor,
                text_tokens: Optional[torch.Tensor] = None) -> dict[str, Any]:
        """Training pass: noisy surrogates for rate, straight-through rounding
        for everything the (deterministic) decoder consumes."""
        y = self.encode(x, text_tokens)
        z = self.hyper_analysis(y)

        z_noisy = quantize(z, "train")
        z_likelihood = self.side_density.likelihood(
            z_noisy, floor=self.cfg.entropy.likelihood_floor
        )
        means, scales = self.hyper_synthesis(ste_round(z))

        y_noisy = quantize(y, "train")
        y_likelihood = discrete_gaussian_likelihood(
            y_noisy, means, scales,
            floor=self.cfg.entropy.likelihood_floor,
            scale_min=self.cfg.entropy.scale_min,
        )
        x_hat = self.synthesis(ste_round(y, means))
        return {
            "x_hat": x_hat,
            "y": y,
            "z": z,
            "likelihoods": {"y": y_likelihood, "z": z_likelihood},
        }

    # ------------------------------------------------------------------
    # parameter accounting

    def attach_text_embedder(self, provider) -> None:
        """Associate the (frozen, external) caption embedder with this model."""
        self._text_embedder = provider

    @property
    def text_embedder(self):
        return self._text_embedder

    @staticmethod
    def _count(module: Optional[nn.Module]) -> int:
        if module is None:
            return 0
        return sum(p.numel() for p in module.parameters())

    @property
    def entropy_parameter_count(self) -> int:
        return (self._count(self.hyper_analysis)
                + self._count(self.hyper_synthesis)
                + self._count(self.side_density))

    def count_parameters(self, component_id: str) -> int:
        """Learnable-scalar count of one component (or everything)."""
        if component_id not in PARAMETER_COMPONENTS:
            raise ValueError(
                f"unknown component {component_id!r}; "
                f"expected one of {', '.join(PARAMETER_COMPONENTS)}"
            )
        if component_id == "backbone":
            return self._count(self.analysis) + self._count(self.synthesis)
        if component_id == "adapter":
            return self._count(self.adapter)
        if component_id == "embedding_provider":
            if self._text_embedder is None:
                return 0
            return int(self._text_embedder.parameter_count)
        return (
            self.count_parameters("backbone")
            + self.count_parameters("adapter")
            + self.count_parameters("embedding_provider")
            + self.entropy_parameter_count
        )

    # ------------------------------------------------------------------
    # identity & persistence

    def model_id(self) -> bytes:
        """8-byte digest of config + weights; stamped into every bitstream."""
        digest = hashlib.sha256()
        digest.update(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.digest()[:8]


def save_checkpoint(model: TextGuidedCodec, path: str | Path,
                    extra: Optional[dict[str, Any]] = None) -> Path:
    """Write a versioned checkpoint archive (leading integer format field)."""
    path = Path(path)
    payload: dict[str, Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "model_id": model.model_id().hex(),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ConfigError(f"extra checkpoint keys shadow core fields: {overlap}")
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TextGuidedCodec, dict[str, Any]]:
    """Rebuild a model from a checkpoint; returns (model, full payload)."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"{path} is not a codec checkpoint")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format version {version} "
            f"(this build reads {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = codec_config_from_dict(payload["model_config"])
    model = TextGuidedCodec(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def ensure_text_embedder(model: TextGuidedCodec) -> TextGuidedCodec:
    """Attach the configured caption embedder if the model needs one.

    Models with a text adapter embed every caption (including the implicit
    empty one) at compression time, so callers that load a checkpoint should
    run this before compressing.  No-adapter models are returned untouched.
    """
    if model.cfg.adapter.enabled and model.text_embedder is None:
        from .text_embedding import build_text_embedder

        model.attach_text_embedder(build_text_embedder(
            model.cfg.embedding.provider, model.cfg.embedding.model_name))
    return model
