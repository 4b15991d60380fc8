"""Model construction determinism, identity digest, checkpoints, and
parameter accounting."""

import pytest
import torch

from taco.config import replace
from taco.errors import ConfigError
from taco.model import (
    CHECKPOINT_FORMAT_VERSION,
    PARAMETER_COMPONENTS,
    TextGuidedCodec,
    ensure_text_embedder,
    load_checkpoint,
    save_checkpoint,
)
from taco.text_embedding import pretrained_text_tower_parameter_count

from conftest import tiny_codec_config


# ----------------------------------------------------------------------
# deterministic construction


def test_same_config_builds_identical_weights():
    cfg = tiny_codec_config(seed=31)
    a, b = TextGuidedCodec(cfg), TextGuidedCodec(cfg)
    state_a, state_b = a.state_dict(), b.state_dict()
    assert state_a.keys() == state_b.keys()
    for key in state_a:
        assert torch.equal(state_a[key], state_b[key]), key
    assert a.model_id() == b.model_id()


def test_construction_ignores_ambient_rng_state():
    cfg = tiny_codec_config(seed=32)
    torch.manual_seed(0)
    a = TextGuidedCodec(cfg)
    torch.manual_seed(12345)
    torch.rand(1000)
    b = TextGuidedCodec(cfg)
    assert a.model_id() == b.model_id()


def test_construction_preserves_ambient_rng_stream():
    torch.manual_seed(7)
    expected = torch.rand(4)
    torch.manual_seed(7)
    TextGuidedCodec(tiny_codec_config(seed=33))
    assert torch.equal(torch.rand(4), expected)


def test_different_seeds_build_different_weights():
    a = TextGuidedCodec(tiny_codec_config(seed=34))
    b = TextGuidedCodec(tiny_codec_config(seed=35))
    assert a.model_id() != b.model_id()


# ----------------------------------------------------------------------
# model identity digest


def test_model_id_is_8_bytes_and_weight_sensitive():
    model = TextGuidedCodec(tiny_codec_config(seed=36))
    ident = model.model_id()
    assert isinstance(ident, bytes) and len(ident) == 8
    with torch.no_grad():
        next(model.parameters()).add_(1e-3)
    assert model.model_id() != ident


def test_model_id_is_config_sensitive():
    base = tiny_codec_config(seed=37)
    a = TextGuidedCodec(base)
    b = TextGuidedCodec(replace(base, loss=replace(base.loss, lam=0.0008)))
    # identical weights (same seed/architecture) but different config digest
    assert a.model_id() != b.model_id()


# ----------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = TextGuidedCodec(tiny_codec_config(seed=38))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 1e-3)  # move off the seeded init
    path = save_checkpoint(model, tmp_path / "ck.pt", extra={"note": "hi"})

    loaded, payload = load_checkpoint(path)
    assert not loaded.training  # ready for inference
    assert loaded.model_id() == model.model_id()
    assert payload["format_version"] == CHECKPOINT_FORMAT_VERSION == 1
    assert payload["model_id"] == model.model_id().hex()
    assert payload["note"] == "hi"
    assert payload["model_config"] == model.cfg.to_dict()
    for key, tensor in model.state_dict().items():
        assert torch.equal(payload["state_dict"][key], tensor)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_checkpoint(tmp_path / "ghost.pt")


def test_checkpoint_garbage_file(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ConfigError, match="unreadable"):
        load_checkpoint(path)


def test_checkpoint_foreign_payload(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"weights": [1, 2, 3]}, path)
    with pytest.raises(ConfigError, match="not a codec checkpoint"):
        load_checkpoint(path)


def test_checkpoint_future_version_rejected(tmp_path):
    model = TextGuidedCodec(tiny_codec_config(seed=39))
    path = save_checkpoint(model, tmp_path / "ck.pt")
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 999
    torch.save(payload, path)
    with pytest.raises(ConfigError, match="version 999"):
        load_checkpoint(path)


def test_checkpoint_extra_cannot_shadow_core_fields(tmp_path):
    model = TextGuidedCodec(tiny_codec_config(seed=40))
    with pytest.raises(ConfigError, match="shadow"):
        save_checkpoint(model, tmp_path / "ck.pt",
                        extra={"state_dict": {}})


# ----------------------------------------------------------------------
# parameter accounting


def test_component_counts_are_additive(toy_model):
    parts = (toy_model.count_parameters("backbone")
             + toy_model.count_parameters("adapter")
             + toy_model.count_parameters("embedding_provider")
             + toy_model.entropy_parameter_count)
    assert toy_model.count_parameters("total") == parts
    assert toy_model.count_parameters("backbone") > 0
    assert toy_model.count_parameters("adapter") > 0
    assert toy_model.count_parameters("embedding_provider") == 0  # stub


def test_total_counts_every_module_parameter(toy_model):
    direct = sum(p.numel() for p in toy_model.parameters())
    # the module tree holds backbone + entropy + adapter; the embedder is
    # external (frozen) and accounted separately
    assert toy_model.count_parameters("total") == direct + \
        toy_model.count_parameters("embedding_provider")


def test_unknown_component_id_rejected(toy_model):
    with pytest.raises(ValueError, match="unknown component"):
        toy_model.count_parameters("decoder")
    assert PARAMETER_COMPONENTS == ("backbone", "adapter",
                                    "embedding_provider", "total")


def test_pretrained_text_tower_architecture_count():
    count = pretrained_text_tower_parameter_count("openai/clip-vit-base-patch32")
    assert count == 63_165_952


# ----------------------------------------------------------------------
# embedder attachment


def test_ensure_text_embedder_attaches_once(toy_model_plain):
    model = TextGuidedCodec(tiny_codec_config(seed=41))
    assert model.text_embedder is None
    ensure_text_embedder(model)
    first = model.text_embedder
    assert first is not None
    ensure_text_embedder(model)
    assert model.text_embedder is first
    # no-adapter models stay embedder-free
    ensure_text_embedder(toy_model_plain)
    assert toy_model_plain.text_embedder is None


def test_embedder_is_not_a_registered_submodule():
    model = ensure_text_embedder(TextGuidedCodec(tiny_codec_config(seed=42)))
    assert "_text_embedder" not in dict(model.named_modules())
    assert all(not name.startswith("_text_embedder")
               for name in model.state_dict())
