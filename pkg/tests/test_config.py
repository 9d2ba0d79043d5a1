"""
Tests for run-config loading and the config data models
"""

import pytest

import config
from exceptions import ConfigError
from models import LossWeights, ModelVariant, TrainConfig, VariantKind


def write_yaml(tmp_path, text: str):
    path = tmp_path / 'run.yaml'
    path.write_text(text, encoding='utf-8')
    return path


class TestLoadRunConfig:
    """Flat YAML run configs"""

    def test_typed_values(self, tmp_path):
        values = config.load_run_config(write_yaml(tmp_path, "variant: f5warp\nlr: 1e-4\nepochs: '3'\n"))
        assert values == {'variant': 'f5warp', 'lr': 1e-4, 'epochs': 3}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load_run_config(tmp_path / 'absent.yaml')

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match='momentum'):
            config.load_run_config(write_yaml(tmp_path, "momentum: 0.9\n"))

    def test_nested_value(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load_run_config(write_yaml(tmp_path, "lr: [1, 2]\n"))

    def test_bad_type(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load_run_config(write_yaml(tmp_path, "epochs: many\n"))

    def test_not_a_mapping(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load_run_config(write_yaml(tmp_path, "- a\n- b\n"))

    def test_empty_file(self, tmp_path):
        assert config.load_run_config(write_yaml(tmp_path, "")) == {}


class TestModelVariant:
    """f1 / fK / fKwarp names"""

    @pytest.mark.parametrize('name, kind, frames', [
        ('f1', VariantKind.SINGLE, 1),
        ('f5', VariantKind.STACKED, 5),
        ('F25warp', VariantKind.WARPED, 25),
    ])
    def test_parse(self, name, kind, frames):
        variant = ModelVariant.parse(name)
        assert (variant.kind, variant.frames) == (kind, frames)
        assert variant.name == name.lower()

    @pytest.mark.parametrize('name', ['f4', 'f1warp', 'g5', 'f5warped', ''])
    def test_rejected(self, name):
        with pytest.raises(ConfigError):
            ModelVariant.parse(name)

    def test_half_window(self):
        assert ModelVariant.parse('f25warp').half_window == 12


class TestTrainConfig:
    """Mapping conversion and the trajectory hash"""

    def test_from_mapping(self):
        cfg = TrainConfig.from_mapping({'variant': 'f5warp', 'frames': 5, 'loss_mode': 'pixel+fc7',
                                        'lambda_fc7': 1e5, 'epochs': 2})
        assert cfg.variant.name == 'f5warp'
        assert cfg.loss_weights.lambda_by_layer == {'fc7': 1e5}
        assert cfg.epochs == 2

    def test_frames_must_match_variant(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({'variant': 'f5', 'frames': 3})

    def test_mapping_round_trip(self):
        cfg = TrainConfig.from_mapping({'variant': 'f5', 'loss_mode': 'pixel+pool3+pool4', 'lr': 1e-3})
        again = TrainConfig.from_mapping(cfg.to_mapping())
        assert again.config_hash() == cfg.config_hash()

    def test_hash_ignores_threads(self):
        assert TrainConfig(threads=1).config_hash() == TrainConfig(threads=4).config_hash()

    def test_hash_tracks_learning_rate(self):
        assert TrainConfig(lr=1e-3).config_hash() != TrainConfig(lr=1e-4).config_hash()

    @pytest.mark.parametrize('kwargs', [{'batch_size': 0}, {'epochs': -1}, {'threads': 0}])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_presets(self):
        assert LossWeights.from_preset('pixel+fc7', 'ytf').lambda_by_layer == {'fc7': 1e5}
        with pytest.raises(ConfigError):
            LossWeights.from_preset('pixel+fc7', 'celeba')
