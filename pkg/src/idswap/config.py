"""Run configuration: YAML file with a fixed schema, defaults and validation.

Unknown keys are rejected; the effective (defaults-merged) config is what gets
snapshotted into checkpoints and reports. See README for the schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "diffusion": {
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "sample_steps": 50,
    },
    "model": {
        "resolution": 64,
        "base_channels": 32,
        "channel_mults": [1, 2, 2],
        "num_res_blocks": 2,
        "attention_resolutions": [32, 16],
        "n_heads": 1,
    },
    "cond": {
        "n_tokens": 4,
        "d": 64,
        "lambda_id": 1.0,
        "lambda_fuse": 1.0,
        "pose_feats_per_angle": 20,
    },
    "pretrain": {
        "identity_epochs": 55,
        "identity_learning_rate": 2e-3,
        "attribute_epochs": 40,
        "attribute_learning_rate": 5e-4,
        "lr_decay_milestones": [0.64, 0.85],
        "batch_size": 64,
        "holdout_fraction": 0.1,
    },
    "stage1": {
        "lambda_id": 1.0,
        "lambda_fuse": 0.0,
        "steps": 2000,
        "batch_size": 8,
        "learning_rate": 2e-4,
    },
    "stage2": {
        "lambda_id": 0.2,
        "lambda_fuse": 1.0,
        "steps": 2000,
        "batch_size": 8,
        "learning_rate": 2e-4,
    },
    "stage3": {
        "lambda_id": 0.2,
        "lambda_fuse": 1.0,
        "steps": 300,
        "batch_size": 4,
        "learning_rate": 5e-5,
        "k": 3,
        "lambda_adv": 0.1,
        "lambda_id_loss": 1.0,
        "sample_steps": 50,
        "disc_learning_rate": 1e-4,
        "disc_widths": [32, 64, 64, 64],
        "disc_power_iterations": 1,
    },
    "eval": {
        "pairs": 100,
        "sample_steps": 50,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict[str, Any], overrides: dict[str, Any], path: str = "") -> dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        full = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {full} must be a mapping")
            merged[key] = _merge(defaults[key], value, full)
        else:
            expected = type(defaults[key])
            if expected in (int, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
                merged[key] = expected(value) if expected is float else value
            elif isinstance(value, expected):
                merged[key] = value
            else:
                raise ConfigError(f"config key {full} has wrong type {type(value).__name__}")
    return merged


def _validate(cfg: dict[str, Any]) -> None:
    d = cfg["diffusion"]
    if d["T"] < 1:
        raise ConfigError("diffusion.T must be >= 1")
    if not (0.0 < d["beta_start"] <= d["beta_end"] < 1.0):
        raise ConfigError("need 0 < diffusion.beta_start <= diffusion.beta_end < 1")
    if not (1 <= d["sample_steps"] <= d["T"]):
        raise ConfigError("diffusion.sample_steps must lie in [1, T]")
    if cfg["stage1"]["lambda_fuse"] != 0.0:
        raise ConfigError("stage1.lambda_fuse must be 0 (identity-only conditioning)")
    s3 = cfg["stage3"]
    if not (1 <= s3["k"] <= s3["sample_steps"]):
        raise ConfigError("stage3.k must lie in [1, stage3.sample_steps]")
    for stage in ("stage1", "stage2", "stage3"):
        s = cfg[stage]
        if s["lambda_id"] < 0 or s["lambda_fuse"] < 0:
            raise ConfigError(f"{stage} lambda values must be non-negative")
        if s["steps"] < 0 or s["batch_size"] < 1:
            raise ConfigError(f"{stage} steps/batch_size out of range")


def default_config() -> dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Load and validate a YAML config; missing keys take defaults."""
    if path is None:
        return default_config()
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    cfg = _merge(DEFAULTS, raw)
    _validate(cfg)
    return cfg


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StageConfig:
    """One training stage's hyperparameters."""

    stage: int
    lambda_id: float
    lambda_fuse: float
    steps: int
    batch_size: int
    learning_rate: float
    # stage 3 only
    k: int = 0
    lambda_adv: float = 0.0
    lambda_id_loss: float = 0.0
    sample_steps: int = 0
    disc_learning_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.stage == 1 and self.lambda_fuse != 0.0:
            raise ValueError("stage 1 requires lambda_fuse = 0")
        if self.stage == 3 and not 1 <= self.k <= self.sample_steps:
            raise ValueError(f"stage 3 requires 1 <= k <= sample_steps, got k={self.k}")


def stage_config(cfg: dict[str, Any], stage: int) -> StageConfig:
    s = cfg[f"stage{stage}"]
    extra = {}
    if stage == 3:
        extra = {
            "k": s["k"],
            "lambda_adv": s["lambda_adv"],
            "lambda_id_loss": s["lambda_id_loss"],
            "sample_steps": s["sample_steps"],
            "disc_learning_rate": s["disc_learning_rate"],
        }
    return StageConfig(
        stage=stage,
        lambda_id=s["lambda_id"],
        lambda_fuse=s["lambda_fuse"],
        steps=s["steps"],
        batch_size=s["batch_size"],
        learning_rate=s["learning_rate"],
        **extra,
    )
