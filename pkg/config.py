"""
Configuration module for langswitch.

Process-level settings come from environment variables (.env file); run
settings live in a JSON ``PipelineConfig`` that CLI flags override.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

MODES = ("bbox", "nl", "nl_bbox")
SWITCHER_COMPONENTS = ("score", "bbox", "image", "map", "embedding")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class Config:
    """Process configuration loaded from environment variables."""

    BASE_DIR = os.path.dirname(os.path.abspath(__file__))
    DATA_DIR = os.getenv("LANGSWITCH_DATA_DIR", os.path.join(BASE_DIR, "data"))
    OUTPUT_DIR = os.getenv("LANGSWITCH_OUTPUT_DIR", os.path.join(BASE_DIR, "runs"))
    LOG_DIR = os.getenv("LANGSWITCH_LOG_DIR", os.path.join(BASE_DIR, "logs"))
    LOG_LEVEL = os.getenv("LANGSWITCH_LOG_LEVEL", "INFO").upper()
    WORKERS = int(os.getenv("LANGSWITCH_WORKERS", "0") or 0) or (os.cpu_count() or 1)

    @classmethod
    def validate(cls):
        """Validate the environment-derived settings."""
        problems = []
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL), int):
            problems.append(f"LANGSWITCH_LOG_LEVEL={cls.LOG_LEVEL!r} is not a logging level")
        if cls.WORKERS < 1:
            problems.append(f"LANGSWITCH_WORKERS must be >= 1, got {cls.WORKERS}")
        if problems:
            raise ValueError("Invalid environment configuration: " + "; ".join(problems))


def _from_dict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")
    return cls(**data)


@dataclass
class GroundingTrainConfig:
    epochs: int = 40
    learning_rate: float = 1e-4
    batch_size: int = 5
    box_weight: float = 1.0
    n_samples: int = 1000
    held_out: int = 200
    seed: int = 0
    freeze_embedding: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("grounding.epochs must be >= 1")
        if not self.learning_rate > 0:
            out.append("grounding.learning_rate must be positive")
        if self.batch_size < 1:
            out.append("grounding.batch_size must be >= 1")
        if self.box_weight < 0:
            out.append("grounding.box_weight must be >= 0")
        return out


@dataclass
class SwitcherTrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-5
    batch_size: int = 1
    held_out_fraction: float = 0.2
    healthy_iou: float = 0.7
    failed_iou: float = 0.5
    ablate: list = field(default_factory=list)
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("switcher_train.epochs must be >= 1")
        if not self.learning_rate > 0:
            out.append("switcher_train.learning_rate must be positive")
        if self.batch_size != 1:
            out.append("switcher_train.batch_size must be 1")
        if not 0.0 <= self.held_out_fraction < 1.0:
            out.append("switcher_train.held_out_fraction must lie in [0, 1)")
        if not self.failed_iou <= self.healthy_iou:
            out.append("switcher_train.failed_iou must not exceed healthy_iou")
        bad = sorted(set(self.ablate) - set(SWITCHER_COMPONENTS))
        if bad:
            out.append(f"switcher_train.ablate has unknown components {bad}")
        return out


@dataclass
class SynthConfig:
    train_sequences: int = 200
    test_sequences: int = 50
    length: int = 60
    frame_width: int = 128
    frame_height: int = 128

    @property
    def frame_size(self) -> tuple[int, int]:
        return (self.frame_width, self.frame_height)

    def problems(self) -> list[str]:
        out = []
        if self.train_sequences < 0 or self.test_sequences < 0:
            out.append("synth sequence counts must be >= 0")
        if self.length < 1:
            out.append("synth.length must be >= 1")
        if self.frame_width < 16 or self.frame_height < 16:
            out.append("synth frame size must be at least 16x16")
        return out


@dataclass
class BenchConfig:
    n_sequences: int = 50
    suite_attributes: list = field(default_factory=lambda: ["FOC", "OV"])
    modes: list = field(default_factory=lambda: list(MODES))
    thresholds: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.2])
    distractor_windows: int = 100

    def problems(self) -> list[str]:
        out = []
        bad = sorted(set(self.modes) - set(MODES))
        if bad:
            out.append(f"bench.modes has unknown modes {bad}")
        if self.n_sequences < 1:
            out.append("bench.n_sequences must be >= 1")
        if self.distractor_windows < 0:
            out.append("bench.distractor_windows must be >= 0")
        return out


@dataclass
class PipelineConfig:
    """Everything a run needs; written as config.json next to its outputs."""

    mode: str = "bbox"
    tracker: str = "ncc"
    switch_threshold: float = 0.7
    naive_score_threshold: float = 0.5
    history: int = 20
    grounding_checkpoint: Optional[str] = None
    embedding_checkpoint: Optional[str] = None
    vocabulary: Optional[str] = None
    switcher_checkpoint: Optional[str] = None
    dataset: Optional[str] = None
    output: str = field(default_factory=lambda: Config.OUTPUT_DIR)
    seed: int = 0
    workers: int = field(default_factory=lambda: Config.WORKERS)
    use_switcher: bool = False
    use_frame_attention: bool = True
    use_spatial_coords: bool = True
    use_tanet: bool = True
    naive_switch: bool = False
    grounding: GroundingTrainConfig = field(default_factory=GroundingTrainConfig)
    switcher_train: SwitcherTrainConfig = field(default_factory=SwitcherTrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    _NESTED = {
        "grounding": GroundingTrainConfig,
        "switcher_train": SwitcherTrainConfig,
        "synth": SynthConfig,
        "bench": BenchConfig,
    }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        for key, nested_cls in cls._NESTED.items():
            if key in data:
                if not isinstance(data[key], dict):
                    raise ConfigError(f"config.{key} must be an object")
                data[key] = _from_dict(nested_cls, data[key], f"config.{key}")
        return _from_dict(cls, data, "config")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def problems(self, need_checkpoints: bool = True) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not math.isfinite(self.switch_threshold):
            out.append("switch_threshold must be finite")
        if self.history < 2:
            out.append("history must be >= 2")
        if self.workers < 1:
            out.append("workers must be >= 1")
        if self.naive_switch and self.use_switcher:
            out.append("naive_switch and use_switcher are mutually exclusive")
        if need_checkpoints:
            if self.mode in ("nl", "nl_bbox"):
                if not self.grounding_checkpoint:
                    out.append(f"mode {self.mode} needs grounding_checkpoint")
                if not self.embedding_checkpoint:
                    out.append(f"mode {self.mode} needs embedding_checkpoint")
            if self.use_switcher and not self.switcher_checkpoint:
                out.append("use_switcher needs switcher_checkpoint")
            for name in ("grounding_checkpoint", "embedding_checkpoint", "switcher_checkpoint", "vocabulary"):
                value = getattr(self, name)
                if value and not Path(value).is_file():
                    out.append(f"{name} {value!r} does not exist")
        for nested in (self.grounding, self.switcher_train, self.synth, self.bench):
            out.extend(nested.problems())
        return out

    def validate(self, need_checkpoints: bool = True):
        """Raise ConfigError naming every problem at once."""
        problems = self.problems(need_checkpoints)
        if problems:
            raise ConfigError("Invalid configuration: " + "; ".join(problems))
