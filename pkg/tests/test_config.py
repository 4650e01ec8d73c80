"""Tests for environment and pipeline configuration."""

import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import MODES, Config, ConfigError, PipelineConfig


class TestEnvironmentConfig:
    def test_defaults_validate(self):
        Config.validate()
        assert Config.WORKERS >= 1

    def test_bad_log_level(self, monkeypatch):
        monkeypatch.setattr(Config, "LOG_LEVEL", "CHATTY")
        with pytest.raises(ValueError):
            Config.validate()


class TestPipelineConfig:
    def test_runtime_defaults_follow_environment(self, monkeypatch):
        monkeypatch.setattr(Config, "WORKERS", 3)
        monkeypatch.setattr(Config, "OUTPUT_DIR", "elsewhere")
        config = PipelineConfig()
        assert config.workers == 3
        assert config.output == "elsewhere"

    def test_defaults(self):
        config = PipelineConfig()
        assert config.mode == "bbox"
        assert config.switch_threshold == 0.7
        assert config.history == 20
        assert config.bench.thresholds == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.2]
        assert set(config.bench.modes) == set(MODES)
        config.validate()

    def test_save_load(self):
        config = PipelineConfig(mode="nl_bbox", seed=4)
        config.synth.length = 12
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            config.save(path)
            assert PipelineConfig.load(path) == config

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="colour"):
            PipelineConfig.from_dict({"colour": "red"})
        with pytest.raises(ConfigError, match="speed"):
            PipelineConfig.from_dict({"synth": {"speed": 3}})

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text("{not json")
            with pytest.raises(ConfigError):
                PipelineConfig.load(path)

    def test_top_level_must_be_object(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps([1, 2]))
            with pytest.raises(ConfigError):
                PipelineConfig.load(path)

    def test_naive_and_learned_are_exclusive(self):
        config = PipelineConfig(naive_switch=True, use_switcher=True)
        with pytest.raises(ConfigError, match="mutually exclusive"):
            config.validate(need_checkpoints=False)

    def test_language_mode_needs_checkpoints(self):
        config = PipelineConfig(mode="nl")
        problems = config.problems()
        assert any("grounding_checkpoint" in p for p in problems)
        assert any("embedding_checkpoint" in p for p in problems)
        assert config.problems(need_checkpoints=False) == []

    def test_missing_checkpoint_file(self):
        config = PipelineConfig(use_switcher=True, switcher_checkpoint="/nonexistent/switcher.ckpt")
        with pytest.raises(ConfigError, match="does not exist"):
            config.validate()

    def test_every_problem_reported(self):
        config = replace(PipelineConfig(), mode="video", history=1, workers=0)
        assert len(config.problems(need_checkpoints=False)) == 3

    def test_nested_problems(self):
        config = PipelineConfig()
        config.switcher_train.ablate = ["colour"]
        config.bench.modes = ["bbox", "sonar"]
        problems = config.problems(need_checkpoints=False)
        assert any("ablate" in p for p in problems)
        assert any("bench.modes" in p for p in problems)
