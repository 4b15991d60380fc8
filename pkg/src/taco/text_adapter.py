"""The text adapter: three linear layers interleaved with three gated
cross-attention layers that inject caption features into the encoder.

Each cross-attention is residual around the LayerNormed query stream and is
scaled by a zero-initialized per-channel gate, so a fresh adapter is exactly
text-inert: every output equals the LayerNorm of its query stream.  The first
and third attentions write text into image features (at an early and a deep
encoder stage); the middle one refreshes the text tokens from image features
in between.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import AdapterConfig
from .errors import ConfigError, ShapeError


def feature_to_tokens(feature: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C): one token per spatial location."""
    return feature.flatten(2).transpose(1, 2)


def tokens_to_feature(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, n, c = tokens.shape
    if n != height * width:
        raise ShapeError(f"{n} tokens cannot fill a {height}x{width} grid")
    return tokens.transpose(1, 2).reshape(b, c, height, width)


class GatedCrossAttention(nn.Module):
    """LN(q) + gate * Attention(LN(q), LN(Lin(context))).

    The linear layer projects context tokens into the query width; q/k/v
    projections feed multi-head scaled dot-product attention.  There is no
    output projection: the per-channel gate (zero-initialized) is the output
    scaling, which makes the zero-gate case exactly LayerNorm of the query.
    """

    def __init__(self, query_dim: int, context_dim: int, num_heads: int) -> None:
        super().__init__()
        if query_dim % num_heads:
            raise ConfigError(
                f"query width {query_dim} not divisible by {num_heads} heads"
            )
        self.num_heads = num_heads
        self.context_proj = nn.Linear(context_dim, query_dim)
        self.query_norm = nn.LayerNorm(query_dim)
        self.context_norm = nn.LayerNorm(query_dim)
        self.q_proj = nn.Linear(query_dim, query_dim)
        self.k_proj = nn.Linear(query_dim, query_dim)
        self.v_proj = nn.Linear(query_dim, query_dim)
        self.gate = nn.Parameter(torch.zeros(query_dim))

    def forward(self, query_tokens: torch.Tensor,
                context_tokens: torch.Tensor) -> torch.Tensor:
        squeeze = query_tokens.dim() == 2
        q_in = query_tokens.unsqueeze(0) if squeeze else query_tokens
        ctx = context_tokens.unsqueeze(0) if context_tokens.dim() == 2 else context_tokens
        if ctx.shape[0] == 1 and q_in.shape[0] > 1:
            ctx = ctx.expand(q_in.shape[0], -1, -1)
        if q_in.shape[0] != ctx.shape[0]:
            raise ShapeError(
                f"query batch {q_in.shape[0]} != context batch {ctx.shape[0]}"
            )

        normed_q = self.query_norm(q_in)
        normed_ctx = self.context_norm(self.context_proj(ctx))

        batch, n_q, width = normed_q.shape
        head_dim = width // self.num_heads
        q = self.q_proj(normed_q).view(batch, n_q, self.num_heads, head_dim).transpose(1, 2)
        k = self.k_proj(normed_ctx).view(batch, -1, self.num_heads, head_dim).transpose(1, 2)
        v = self.v_proj(normed_ctx).view(batch, -1, self.num_heads, head_dim).transpose(1, 2)
        attended = F.scaled_dot_product_attention(q, k, v)
        attended = attended.transpose(1, 2).reshape(batch, n_q, width)

        out = normed_q + self.gate * attended
        return out.squeeze(0) if squeeze else out


class TextAdapter(nn.Module):
    """Three gated cross-attentions wired to three encoder tap stages."""

    def __init__(self, cfg: AdapterConfig, stage_channels) -> None:
        super().__init__()
        self.cfg = cfg
        tap1, tap2, tap3 = cfg.tap_stages
        c1, c2, c3 = (stage_channels(s) for s in (tap1, tap2, tap3))
        for name, channels in (("first", c1), ("third", c3)):
            if channels % cfg.num_heads:
                raise ConfigError(
                    f"{name} tap width {channels} not divisible by "
                    f"{cfg.num_heads} heads"
                )
        self.text_to_image_early = GatedCrossAttention(c1, cfg.text_dim, cfg.num_heads)
        self.image_to_text = GatedCrossAttention(cfg.text_dim, c2, cfg.num_heads)
        self.text_to_image_deep = GatedCrossAttention(c3, cfg.text_dim, cfg.num_heads)

    def cross_attentions(self) -> tuple[GatedCrossAttention, ...]:
        return (self.text_to_image_early, self.image_to_text, self.text_to_image_deep)

    def inject(self, tap_features: Sequence[torch.Tensor],
               text_tokens: torch.Tensor) -> list[torch.Tensor]:
        """Apply the adapter to the three tapped encoder features in order.

        The first and last features are rewritten from text; the middle one
        only serves as context to refresh the text tokens and passes through
        unchanged.  Returns the features the encoder continues with.
        """
        if len(tap_features) != 3:
            raise ConfigError(f"expected 3 tap features, got {len(tap_features)}")
        sizes = [f.shape[-2] * f.shape[-1] for f in tap_features]
        if not (sizes[0] >= sizes[1] >= sizes[2]):
            raise ShapeError(f"tap spatial sizes must be non-increasing, got {sizes}")
        assert sizes[2] < sizes[0], "deep tap must be spatially smaller than early tap"

        v1, v2, v3 = tap_features
        out1 = self._rewrite_image(self.text_to_image_early, v1, text_tokens)
        updated_text = self.image_to_text(text_tokens, feature_to_tokens(v2))
        out3 = self._rewrite_image(self.text_to_image_deep, v3, updated_text)
        return [out1, v2, out3]

    @staticmethod
    def _rewrite_image(ca: GatedCrossAttention, feature: torch.Tensor,
                       text_tokens: torch.Tensor) -> torch.Tensor:
        h, w = feature.shape[-2:]
        return tokens_to_feature(ca(feature_to_tokens(feature), text_tokens), h, w)

    def make_tap(self, text_tokens: torch.Tensor):
        """A stage-tap callback for the analysis transform.

        Carries the text tokens through the encode: rewrites the early tap,
        refreshes text at the middle tap, rewrites the deep tap.
        """
        tap1, tap2, tap3 = self.cfg.tap_stages
        state = {"text": text_tokens, "early_size": None}

        def tap(stage: int, feature: torch.Tensor) -> torch.Tensor:
            if stage == tap1:
                state["early_size"] = feature.shape[-2] * feature.shape[-1]
                return self._rewrite_image(self.text_to_image_early, feature,
                                           state["text"])
            if stage == tap2:
                state["text"] = self.image_to_text(state["text"],
                                                   feature_to_tokens(feature))
                return feature
            if stage == tap3:
                size = feature.shape[-2] * feature.shape[-1]
                if state["early_size"] is not None and size >= state["early_size"]:
                    raise ShapeError(
                        "deep tap feature is not smaller than the early tap"
                    )
                return self._rewrite_image(self.text_to_image_deep, feature,
                                           state["text"])
            return feature

        return tap
