"""
Tests for run configuration loading and precedence
"""

from pathlib import Path

import pytest

from bmlp.config import DataConfig, RunConfig, env_overrides, load_config
from bmlp.core.encoding import Variant
from bmlp.errors import ConfigurationError


class TestDefaults:

    def test_empty_config(self):
        cfg = load_config(env={}, dotenv=False)
        assert cfg.model == RunConfig().model
        assert cfg.data.target_behavior == "buy"
        assert (cfg.data.min_item_purchases, cfg.data.min_user_purchases) == (5, 5)
        assert cfg.eval.ks == [10, 20]
        assert cfg.bench.lengths == [64, 128, 256, 512]
        assert cfg.run.threads >= 1

    def test_manifest_is_json_ready(self):
        manifest = RunConfig().manifest()
        assert manifest["model"]["variant"] == "BT"
        assert manifest["data"]["input"] is None


class TestFile:

    def test_fixture_config(self, fixture_dir):
        cfg = load_config(fixture_dir / "config.toml", env={}, dotenv=False)
        assert cfg.data.input == Path("fixtures/mini/interactions.tsv")
        assert (cfg.model.d, cfg.model.seq_len, cfg.model.aux_len) == (8, 50, 5)
        assert cfg.model.variant is Variant.BT
        # [train] lands in the same HyperParams
        assert (cfg.model.batch_size, cfg.model.seed, cfg.model.eval_every) == (16, 7, 10)
        assert cfg.seed == 7
        assert cfg.sweep.grid == {"heads": [1, 2, 4], "aux_len": [3, 5, 7]}
        assert cfg.eval.intent is True

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\nhidden_size = 3\n")
        with pytest.raises(ConfigurationError, match="hidden_size"):
            load_config(path, env={}, dotenv=False)

    def test_inconsistent_model(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\nd = 3\nheads = 4\n")
        with pytest.raises(ConfigurationError):
            load_config(path, env={}, dotenv=False)

    def test_broken_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model\n")
        with pytest.raises(ConfigurationError):
            load_config(path, env={}, dotenv=False)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.toml")


class TestPrecedence:

    def test_env_values(self):
        assert env_overrides({"BMLP_THREADS": "3", "BMLP_SEED": "11", "BMLP_LOG_LEVEL": "DEBUG"}) == {
            "run": {"threads": 3, "log_level": "DEBUG"},
            "model": {"seed": 11},
        }
        assert env_overrides({"BMLP_THREADS": ""}) == {}

    def test_env_over_file_and_flags_over_env(self, fixture_dir):
        env = {"BMLP_SEED": "11", "BMLP_THREADS": "4"}
        cfg = load_config(fixture_dir / "config.toml", env=env, dotenv=False)
        assert (cfg.seed, cfg.run.threads) == (11, 4)
        cfg = load_config(
            fixture_dir / "config.toml", overrides={"model": {"seed": 99}}, env=env, dotenv=False
        )
        assert (cfg.seed, cfg.run.threads) == (99, 4)

    def test_none_overrides_are_ignored(self, fixture_dir):
        cfg = load_config(
            fixture_dir / "config.toml", overrides={"run": {"out": None}, "model": {"d": None}}, env={}, dotenv=False
        )
        assert cfg.model.d == 8
        assert cfg.run.out == Path("runs/latest")


class TestDataSection:

    def test_preset_fills_thresholds(self):
        cfg = DataConfig(preset="Tmall")
        assert (cfg.min_item_purchases, cfg.min_user_purchases) == (20, 10)

    def test_explicit_threshold_beats_preset(self):
        cfg = DataConfig(preset="tmall", min_user_purchases=3)
        assert (cfg.min_item_purchases, cfg.min_user_purchases) == (20, 3)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            DataConfig(preset="netflix")

    def test_exclusion_needs_both_ends(self):
        with pytest.raises(ValueError):
            DataConfig(exclude_start=10)
        cfg = DataConfig(exclude_start=10, exclude_end=20)
        assert (cfg.exclude_start, cfg.exclude_end) == (10, 20)
