"""
Tests for configuration parsing, validation and serialisation.
"""

import pytest

from python_pat.config import (ConfigDefaults, ExperimentConfig, config_hash, load_config, parse_config,
                               serialize_config)
from python_pat.exceptions import PatConfigError


class TestParseConfig:

    def test_empty_text_gives_defaults(self):
        assert parse_config("") == ExperimentConfig()
        assert parse_config("# only a comment\n\n") == ExperimentConfig()

    def test_default_hyperparameters(self):
        config = ExperimentConfig()
        assert config.dgd.k_max == 5
        assert config.dgd.batch == 2
        assert config.dgd.lr == 5e-5
        assert config.dgd.transfer_lr == 1e-5 and config.dgd.transfer_epochs == 10
        assert config.unet.lr == 1e-4
        assert config.data.snr == 15.0
        assert config.geometry.subsample_factor == 4
        assert len(config.tv.lambda_grid) == 7

    def test_values_are_typed(self):
        config = parse_config(
            "geometry.dims = 32, 32\n"
            "data.background = true\n"
            "dgd.lr = 1e-3  # faster\n"
            "tv.lambda_grid = 1e-4, 1e-3\n"
            "geometry.dt = auto\n")
        assert config.geometry.dims == (32, 32)
        assert config.data.background is True
        assert config.dgd.lr == 1e-3
        assert config.tv.lambda_grid == (1e-4, 1e-3)
        assert config.geometry.dt is None

    def test_non_positive_k_max_names_line(self):
        with pytest.raises(PatConfigError) as info:
            parse_config("data.snr = 15\n\ndgd.k_max = 0\n")
        assert info.value.line == 3
        assert info.value.key == 'dgd.k_max'
        assert "line 3" in str(info.value)

    @pytest.mark.parametrize('text', [
        "dgd.unknown = 1",
        "nosection.k_max = 1",
        "dgd.k_max",
        "k_max = 3",
        "dgd.k_max = five",
        "data.phantom = bones",
        "data.background = maybe",
        "dgd.k_max = auto",
        "geometry.dims = 8, 8",
        "geometry.padding = -1",
    ])
    def test_invalid_lines(self, text):
        with pytest.raises(PatConfigError):
            parse_config(text)

    def test_duplicate_key(self):
        with pytest.raises(PatConfigError, match="duplicate"):
            parse_config("dgd.k_max = 2\ndgd.k_max = 3\n")

    def test_subsample_factor_above_sensor_count(self):
        with pytest.raises(PatConfigError):
            parse_config("geometry.dims = 16, 16\ngeometry.subsample_factor = 9\n")

    def test_auto_loss_threshold(self):
        assert parse_config("dgd.loss_add_beta = auto").dgd.loss_add_beta is None
        assert parse_config("dgd.loss_add_beta = 0.5").dgd.loss_add_beta == 0.5


class TestSerialisation:

    def test_roundtrip(self):
        config = parse_config("geometry.dims = 32, 32\ndgd.k_max = 3\ndata.background = true\n")
        assert parse_config(serialize_config(config)) == config

    def test_every_key_serialised(self):
        text = serialize_config(ExperimentConfig())
        keys = {line.split('=')[0].strip() for line in text.splitlines()}
        expected = {f"{section}.{name}" for section in ConfigDefaults.SECTIONS
                    for name in ConfigDefaults.field_types(section)}
        assert keys == expected

    def test_hash_tracks_content(self):
        assert config_hash(ExperimentConfig()) == config_hash(parse_config(""))
        assert config_hash(ExperimentConfig()) != config_hash(parse_config("dgd.k_max = 4"))


class TestLoadConfig:

    def test_none_gives_defaults(self):
        assert load_config(None) == ExperimentConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(PatConfigError):
            load_config(tmp_path / 'missing.cfg')

    def test_reads_file(self, tiny_config_file):
        config = load_config(tiny_config_file)
        assert config.geometry.dims == (16, 16)
        assert config.dgd.k_max == 2


class TestOverrides:

    def test_with_seed(self):
        config = ExperimentConfig().with_seed(100)
        assert (config.data.data_seed, config.dgd.seed, config.unet.seed) == (100, 101, 102)
        assert config.data.test_seed == ExperimentConfig().data.test_seed

    def test_with_threads(self):
        assert ExperimentConfig().with_threads(4).run.threads == 4
