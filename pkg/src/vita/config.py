"""Configuration dataclasses and strict JSON loading.

Config files are nested JSON documents mirroring the dataclass sections
below. Unknown sections or keys are rejected rather than ignored, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    video_only: int = 500
    action_only: int = 500
    paired: int = 500
    tasks: list[str] = field(default_factory=lambda: ["reach", "push", "color_match"])
    seed: int = 7
    episode_cap: int = 40


@dataclass
class ModelConfig:
    frame_size: int = 64
    patch_size: int = 8
    feature_channels: int = 64
    latent_dim: int = 64
    codebook_size: int = 256
    recent_capacity: int = 1024
    horizon: int = 8
    action_dim: int = 7
    state_dim: int = 3
    width: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    ctx_pool: int = 2
    n_text_max: int = 10
    max_subtasks: int = 2
    max_hybrid: int = 48
    pool_queries: int = 4
    pool_query_dim: int = 64
    frame_decoder_width: int = 64
    action_encoder_hidden: int = 128
    action_decoder_width: int = 64
    coeff_keep: int = 0            # 0 keeps all DCT coefficients


@dataclass
class TrainConfig:
    stage: str = "warmup"          # warmup | cotrain | finetune
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_interval: int = 50
    lambda_l1: float = 1.0
    lambda_ssim: float = 1.0
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    commitment_beta: float = 0.25
    align_weight: float = 0.25     # paired-batch pull of action latents toward visual latents
    revival_interval: int = 1000
    revival_threshold: int = 1
    visual_loss_steps: int = 1     # decoded steps per sample for the co-train visual term
    supervise_subtasks: bool = False
    freeze_extractor: bool = False


@dataclass
class EvalConfig:
    rollouts: int = 100
    task: str = "reach"
    temperature: float = 0.0
    replan_every: int = 0          # 0 means the full horizon
    episode_cap: int = 40
    latency_lengths: list[int] = field(default_factory=lambda: [12, 24, 48])


@dataclass
class VitaConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup: TrainConfig = field(default_factory=lambda: TrainConfig(stage="warmup", steps=3000))
    cotrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="cotrain", steps=3000))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(stage="finetune", steps=1500))
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "warmup": TrainConfig,
    "cotrain": TrainConfig,
    "finetune": TrainConfig,
    "eval": EvalConfig,
}


def _apply_section(obj, doc: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        current = getattr(obj, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a boolean")
        elif isinstance(current, int) and not isinstance(value, bool):
            if not isinstance(value, (int, float)) or int(value) != value:
                raise ConfigError(f"{section}.{key} must be an integer")
            value = int(value)
        elif isinstance(current, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number")
            value = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{section}.{key} must be a string")
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key} must be a list")
        setattr(obj, key, value)


def load_config(path=None, overrides: dict | None = None) -> VitaConfig:
    """Defaults, optionally updated from a JSON file; unknown keys rejected."""
    cfg = VitaConfig()
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        for section, body in doc.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(body, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _apply_section(getattr(cfg, section), body, section)
    for section in ("warmup", "cotrain", "finetune"):
        expected = section
        actual = getattr(cfg, section).stage
        if actual != expected:
            raise ConfigError(f"{section}.stage must be {expected!r}, got {actual!r}")
    return cfg


def config_to_dict(cfg: VitaConfig) -> dict:
    return dataclasses.asdict(cfg)
