"""Caption embedding providers: a frozen pretrained text tower or an offline stub.

Both produce a fixed-length sequence of 38 token features of width 512.  The
stub needs no downloads and is fully deterministic, so the whole pipeline can
run (and be tested) without network access; the pretrained provider loads the
real CLIP text tower and raises if its weights cannot be obtained.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ProviderUnavailableError, ShapeError

TOKEN_LENGTH = 38
TEXT_DIM = 512

START_TOKEN = "<start>"
END_TOKEN = "<end>"

_WORD_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


@dataclass
class TextEmbedding:
    """Fixed-shape caption features: (38, 512) tokens, zero-padded."""

    tokens: torch.Tensor
    valid_length: int

    def __post_init__(self) -> None:
        if tuple(self.tokens.shape) != (TOKEN_LENGTH, TEXT_DIM):
            raise ShapeError(
                f"text embedding must be ({TOKEN_LENGTH}, {TEXT_DIM}), "
                f"got {tuple(self.tokens.shape)}"
            )
        if not 1 <= self.valid_length <= TOKEN_LENGTH:
            raise ShapeError(f"valid_length {self.valid_length} outside 1..{TOKEN_LENGTH}")


def stack_embeddings(embeddings: list[TextEmbedding]) -> torch.Tensor:
    """Stack per-caption embeddings into a (B, 38, 512) batch tensor."""
    return torch.stack([e.tokens for e in embeddings], dim=0)


class StubTextEmbedder:
    """Deterministic, dependency-free text embedder for offline runs.

    Recipe (frozen; tests rely on it): lowercase the caption, split into
    word/punctuation tokens, wrap in start/end markers, and truncate so the
    end marker survives at most at position 37.  Row ``i`` holding token ``t``
    is the unit-normalized 512-dim standard-normal draw from a generator
    seeded with the first 8 bytes of SHA-256 of ``"{i}|{t}"``; padding rows
    are zero.  The embedder has no learnable parameters.
    """

    name = "stub"

    def __init__(self, token_length: int = TOKEN_LENGTH, dim: int = TEXT_DIM) -> None:
        self.token_length = token_length
        self.dim = dim

    @property
    def parameter_count(self) -> int:
        return 0

    def tokenize(self, text: str) -> list[str]:
        words = _WORD_RE.findall(text.lower())
        body = words[: self.token_length - 2]
        return [START_TOKEN, *body, END_TOKEN]

    def _vector(self, index: int, token: str) -> np.ndarray:
        seed = hashlib.sha256(f"{index}|{token}".encode()).digest()[:8]
        rng = np.random.default_rng(int.from_bytes(seed, "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, caption: str) -> TextEmbedding:
        tokens = self.tokenize(caption)
        out = np.zeros((self.token_length, self.dim), dtype=np.float32)
        for i, tok in enumerate(tokens):
            out[i] = self._vector(i, tok)
        return TextEmbedding(tokens=torch.from_numpy(out), valid_length=len(tokens))

    def embed_batch(self, captions: list[str]) -> list[TextEmbedding]:
        return [self.embed(c) for c in captions]


class ClipTextEmbedder:
    """Frozen pretrained CLIP text tower (last hidden states, truncated to 38).

    Requires the ``transformers`` package and downloadable (or cached)
    weights; anything missing raises ``ProviderUnavailableError`` rather than
    silently falling back.
    """

    name = "pretrained_clip_text"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32") -> None:
        self.model_name = model_name
        self.token_length = TOKEN_LENGTH
        self.dim = TEXT_DIM
        try:
            from transformers import AutoTokenizer, CLIPTextModel
        except ImportError as exc:
            raise ProviderUnavailableError(
                "the pretrained text embedder needs the 'transformers' package"
            ) from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
            self.model = CLIPTextModel.from_pretrained(model_name)
        except Exception as exc:
            raise ProviderUnavailableError(
                f"could not load pretrained text tower {model_name!r}: {exc}"
            ) from exc
        self.model.eval()
        self.model.requires_grad_(False)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    @torch.no_grad()
    def embed(self, caption: str) -> TextEmbedding:
        enc = self.tokenizer(
            caption,
            padding="max_length",
            truncation=True,
            max_length=self.token_length,
            return_tensors="pt",
        )
        hidden = self.model(**enc).last_hidden_state[0]
        valid = int(enc["attention_mask"][0].sum().item())
        return TextEmbedding(tokens=hidden.float(), valid_length=valid)

    def embed_batch(self, captions: list[str]) -> list[TextEmbedding]:
        return [self.embed(c) for c in captions]


def pretrained_text_tower_parameter_count(
    model_name: str = "openai/clip-vit-base-patch32",
) -> int:
    """Parameter count of the pretrained text tower's architecture.

    Determined by the architecture alone, so it works without downloading
    weights (the default config matches the published tower).
    """
    try:
        from transformers import CLIPTextConfig, CLIPTextModel
    except ImportError as exc:
        raise ProviderUnavailableError(
            "counting the pretrained tower needs the 'transformers' package"
        ) from exc
    try:
        config = CLIPTextConfig.from_pretrained(model_name)
    except Exception:
        config = CLIPTextConfig()
    model = CLIPTextModel(config)
    return sum(p.numel() for p in model.parameters())


def build_text_embedder(provider: str, model_name: str = "openai/clip-vit-base-patch32"):
    if provider == "stub":
        return StubTextEmbedder()
    if provider == "pretrained_clip_text":
        return ClipTextEmbedder(model_name)
    raise ConfigError(
        f"unknown embedding provider {provider!r}; "
        "expected 'stub' or 'pretrained_clip_text'"
    )


def embed_caption(provider, caption: str) -> TextEmbedding:
    """Embed one caption with whichever provider is configured."""
    if caption is None:
        caption = ""
    return provider.embed(caption)
