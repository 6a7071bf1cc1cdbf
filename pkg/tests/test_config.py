from __future__ import annotations

import json

import pytest

from gradepipe.config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    load_config,
    save_config,
)


class TestPipelineConfig:
    def test_defaults(self):
        config = PipelineConfig()
        assert config.mode == "dual"
        assert config.runs == 3
        assert config.parallelism == 8
        assert config.max_retries == 2
        assert config.withhold_flagged is True

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            PipelineConfig(mode="triple")

    def test_stabilized_needs_multiple_runs(self):
        with pytest.raises(ConfigError):
            PipelineConfig(mode="stabilized", runs=1)
        with pytest.raises(ConfigError):
            PipelineConfig(mode="dual+stabilized", runs=1)
        PipelineConfig(mode="dual", runs=1)  # fine

    def test_range_checks(self):
        with pytest.raises(ConfigError):
            PipelineConfig(parallelism=0)
        with pytest.raises(ConfigError):
            PipelineConfig(max_retries=-1)
        with pytest.raises(ConfigError):
            PipelineConfig(temperature=3.0)
        with pytest.raises(ConfigError):
            PipelineConfig(grid_tenths=0)


class TestLoadConfig:
    def test_file_plus_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"mode": "stabilized", "runs": 5, "parallelism": 2}))
        config = load_config(path, {"runs": 7, "temperature": None})
        assert config.mode == "stabilized"
        assert config.runs == 7  # override wins
        assert config.parallelism == 2  # file value kept
        assert config.temperature == 0.0  # None override ignored

    def test_no_file_all_defaults(self):
        assert load_config() == PipelineConfig()

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"paralelism": 4}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{不")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_round_trip(self, tmp_path):
        config = PipelineConfig(mode="dual+stabilized", runs=3, temperature=0.1)
        path = tmp_path / "config.json"
        save_config(path, config)
        assert load_config(path) == config


class TestConfigHash:
    def test_stable_and_short(self):
        assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
        assert len(config_hash(PipelineConfig())) == 12

    def test_sensitive_to_values(self):
        assert config_hash(PipelineConfig()) != config_hash(PipelineConfig(runs=5))
        assert config_hash(PipelineConfig()) != config_hash(PipelineConfig(withhold_flagged=False))
