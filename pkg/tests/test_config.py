"""
Tests for configuration parsing and validation.
"""

import pytest
import yaml

from dual_branch_sam.config import (
    ModelConfig,
    config_from_mapping,
    format_config,
    load_config,
    parse_config_text,
    save_config,
)
from dual_branch_sam.exceptions import ConfigurationError, FormatError


class TestDefaults:
    def test_defaults_validate(self):
        config = ModelConfig().validate()
        assert config.grid == 8
        assert config.mask_size == 32
        assert config.conv.grid == config.grid

    def test_derived_views(self, tiny_config):
        assert tiny_config.vit.blocks_per_stage == 1
        assert tiny_config.deform.value_dim == 8
        assert tiny_config.mask_size == 16


class TestValidation:
    @pytest.mark.parametrize(
        "changes",
        [
            {"image_size_conv": 64},
            {"image_size_vit": 100},
            {"embed_dim": 60},
            {"depth": 3},
            {"drop_rate": 1.0},
            {"drop_path_rate": -0.1},
            {"dtype": "float16"},
            {"betas": (0.9, 1.0)},
            {"batch_size": 0},
        ],
    )
    def test_invalid_configs_rejected(self, changes):
        with pytest.raises(ConfigurationError):
            ModelConfig().replace(**changes).validate()

    def test_grid_mismatch_message_names_both_sides(self):
        with pytest.raises(ConfigurationError, match="conv grid"):
            ModelConfig(image_size_conv=64).validate()


class TestParsing:
    def test_key_value_text(self):
        text = """
        # overfit run
        lr0 = 3e-3   # faster
        epochs = 5
        use_fusion = false
        betas = 0.8, 0.9
        """
        config = config_from_mapping(parse_config_text(text)).validate()
        assert config.lr0 == 3e-3
        assert config.epochs == 5
        assert config.use_fusion is False
        assert config.betas == (0.8, 0.9)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown config keys: learning_rate"):
            config_from_mapping({"learning_rate": 1.0})

    def test_bad_value(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            config_from_mapping({"epochs": "many"})

    def test_missing_equals(self):
        with pytest.raises(FormatError, match="line 2"):
            parse_config_text("epochs = 2\nbatch_size 4\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            parse_config_text("epochs = 2\nepochs = 3\n")

    def test_save_load_round_trip(self, tmp_path, tiny_config):
        path = tmp_path / "run.cfg"
        save_config(tiny_config, path)
        assert load_config(path) == tiny_config
        assert format_config(load_config(path)) == format_config(tiny_config)

    def test_yaml_config(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"epochs": 3, "use_bilateral": False, "lr0": 0.001}))
        config = load_config(path)
        assert (config.epochs, config.use_bilateral, config.lr0) == (3, False, 0.001)

    def test_yaml_must_be_mapping(self, tmp_path):
        path = tmp_path / "run.yml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(FormatError):
            load_config(path)

    def test_invalid_file_is_rejected_on_load(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("image_size_conv = 64\n")
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_bundled_configs_load(self):
        from pathlib import Path

        import dual_branch_sam

        configs = Path(dual_branch_sam.__file__).parent / "configs"
        assert load_config(configs / "default.cfg") == ModelConfig()
        overfit = load_config(configs / "overfit.cfg")
        assert overfit.drop_rate == 0.0 and overfit.max_shift == 0.0
