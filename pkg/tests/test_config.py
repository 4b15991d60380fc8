"""Configuration parsing, validation, and the rate-point grid."""

import dataclasses

import pytest
import yaml

from taco.config import (
    LAMBDA_GRID,
    LAMBDA_TAG_CUSTOM,
    AdapterConfig,
    BackboneConfig,
    CodecConfig,
    EntropyConfig,
    LossWeights,
    TrainConfig,
    codec_config_from_dict,
    dump_config,
    lambda_to_tag,
    load_config,
    replace,
    tag_to_lambda,
)
from taco.errors import ConfigError


class TestLambdaGrid:
    def test_grid_values(self):
        assert LAMBDA_GRID == (0.0004, 0.0008, 0.0016, 0.004, 0.009, 0.015)

    @pytest.mark.parametrize("idx,lam", list(enumerate(LAMBDA_GRID)))
    def test_round_trip(self, idx, lam):
        assert lambda_to_tag(lam) == idx
        assert tag_to_lambda(idx) == pytest.approx(lam)

    def test_off_grid_gets_custom_tag(self):
        assert lambda_to_tag(0.12345) == LAMBDA_TAG_CUSTOM
        assert tag_to_lambda(LAMBDA_TAG_CUSTOM) is None

    def test_unknown_tag_rejected(self):
        with pytest.raises(ConfigError):
            tag_to_lambda(17)


class TestValidation:
    def test_default_config_valid(self):
        CodecConfig().validate()

    def test_bad_attention_stage(self):
        cfg = CodecConfig(backbone=BackboneConfig(attention_stages=(9,)))
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_adapter_taps_must_increase(self):
        cfg = CodecConfig(adapter=AdapterConfig(tap_stages=(3, 2, 4)))
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_cdf_precision_window(self):
        for bad in (11, 17):
            with pytest.raises(ConfigError):
                CodecConfig(entropy=EntropyConfig(cdf_precision=bad)).validate()
        for ok in (12, 16):
            CodecConfig(entropy=EntropyConfig(cdf_precision=ok)).validate()

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            CodecConfig(loss=LossWeights(lam=-1.0)).validate()

    def test_train_decay_epochs_must_increase(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_decay_epochs=(48, 45)).validate()
        with pytest.raises(ConfigError):
            TrainConfig(lr_decay_epochs=(45, 45)).validate()

    def test_train_decay_epochs_inside_range(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=10, lr_decay_epochs=(10,)).validate()
        TrainConfig(epochs=10, lr_decay_epochs=(9,)).validate()

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError):
            TrainConfig(ablation="mystery").validate()


class TestYaml:
    def test_default_yaml_parses(self):
        codec_cfg, train_cfg = load_config("configs/default.yaml")
        assert codec_cfg.backbone.base_channels == 192
        assert train_cfg.epochs == 50

    def test_round_trip_through_dump(self, tmp_path):
        codec_cfg = CodecConfig(loss=LossWeights(lam=0.009))
        train_cfg = TrainConfig(epochs=7, lr_decay_epochs=(5,))
        path = tmp_path / "cfg.yaml"
        path.write_text(dump_config(codec_cfg, train_cfg))
        loaded_codec, loaded_train = load_config(path)
        assert loaded_codec == codec_cfg
        assert loaded_train == train_cfg

    def test_lambda_alias_in_yaml(self, tmp_path):
        raw = {"model": {"loss": {"lambda": 0.0016}}, "train": {}}
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(raw))
        codec_cfg, _ = load_config(path)
        assert codec_cfg.loss.lam == pytest.approx(0.0016)
        assert "lambda" in codec_cfg.to_dict()["loss"]
        assert "lam" not in codec_cfg.to_dict()["loss"]

    def test_unknown_key_rejected(self, tmp_path):
        raw = {"model": {"loss": {"lambda": 0.004, "bogus": 1}}, "train": {}}
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError, match="bogus"):
            load_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"model": {}, "train": {}, "extra": {}}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_dict_round_trip_preserves_equality(self):
        cfg = CodecConfig(adapter=AdapterConfig(enabled=False), seed=9)
        assert codec_config_from_dict(cfg.to_dict()) == cfg


def test_replace_produces_new_frozen_instance():
    cfg = CodecConfig()
    changed = replace(cfg, seed=3)
    assert changed.seed == 3 and cfg.seed == 0
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 1
