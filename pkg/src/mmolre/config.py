"""Run configuration: presets, YAML files and ``KEY=VALUE`` overrides.

A resolved config is a plain nested dict with the sections ``model``,
``fusion``, ``train``, ``data``, ``analysis`` plus the top-level keys
``preset``, ``variant``, ``head_hidden`` and ``n_classes``.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable

import yaml

from .fusion import FusionConfig
from .model import VARIANTS, TrainConfig
from .data import DatasetConfig
from .unitse import MoLREConfig


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# Shared-expert rank settings of the rank sweep (15 experts each).
RANK_SETTINGS: dict[str, list[int]] = {
    "16x15": [16] * 15,
    "64x15": [64] * 15,
    "128x15": [128] * 15,
    "16+8n": [16 + 8 * n for n in range(15)],
}

DEFAULTS: dict[str, Any] = {
    "preset": None,
    "variant": "mmolre",
    "n_classes": 6,
    "head_hidden": None,
    "model": {
        "d": 768,
        "n_experts": 15,
        "top_k": 8,
        "rank": 128,
        "rank_setting": None,
        "shared_ranks": None,
        "task_rank": 128,
        "kernel_sizes": [3, 1],
        "num_blocks": 2,
    },
    "fusion": {"n_layers": 5, "d_ff": None, "n_heads": 1},
    "train": {
        "batch_size": 8,
        "learning_rate": 1e-3,
        "weight_decay": 0.01,
        "max_steps": 500,
        "early_stop_patience": 8,
        "seed": 0,
        "loss": "bce",
        "record_wall_time": False,
        "val_fraction": 0.2,
    },
    "data": {
        "features_path": None,
        "n_samples": 256,
        "t_text": 8,
        "t_audio": 10,
        "latent_dim": 8,
        "task_correlation": 0.7,
        "noise_std": 0.1,
        "seed": 0,
    },
    "analysis": {"seq_len": 50, "include_shared": True, "include_task": True, "include_routers": True},
}

PRESETS: dict[str, dict[str, Any]] = {
    # CMU-MOSEI setting: N=15, r_n=128, k=8, task rank 128, 5 fusion layers,
    # lr 1e-5, batch 8, AdamW, early-stopping patience 8.
    "paper-mosei": {
        "model": {"d": 768, "n_experts": 15, "top_k": 8, "rank": 128, "task_rank": 128},
        "fusion": {"n_layers": 5},
        "train": {"learning_rate": 1e-5, "batch_size": 8, "early_stop_patience": 8},
    },
    # CMU-MOSI setting: N=15, r_n=64, k=11, task rank 128, 5 fusion layers.
    "paper-mosi": {
        "model": {"d": 768, "n_experts": 15, "top_k": 11, "rank": 64, "task_rank": 128},
        "fusion": {"n_layers": 5},
        "train": {"learning_rate": 1e-5, "batch_size": 8, "early_stop_patience": 8},
    },
    # Laptop-sized: a 16-sample single-batch overfit run.
    "desk": {
        "model": {"d": 32, "n_experts": 4, "top_k": 2, "rank": 8, "task_rank": 8},
        "fusion": {"n_layers": 2},
        "train": {"learning_rate": 1e-3, "batch_size": 16, "max_steps": 500, "val_fraction": 0.0},
        "data": {"n_samples": 16, "t_text": 6, "t_audio": 8},
    },
}

PRESET_HELP = {
    "paper-mosei": "d=768, N=15, r=128, k=8, task rank 128, L=5, lr 1e-5, batch 8 (published CMU-MOSEI setting)",
    "paper-mosi": "d=768, N=15, r=64, k=11, task rank 128, L=5, lr 1e-5, batch 8 (published CMU-MOSI setting)",
    "desk": "d=32, N=4, r=8, k=2, L=2, lr 1e-3, 16 samples, batch 16, 500 steps",
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(text, "override must look like KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-5") as strings
        try:
            value = float(value)
        except ValueError:
            pass
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    preset: str | None = None,
    seed: int | None = None,
) -> dict:
    """Defaults, then preset, then the config file, then ``--set`` overrides."""
    file_cfg: dict = {}
    if path is not None:
        try:
            file_cfg = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError("--config", str(exc)) from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("--config", "top level must be a mapping")
    name = preset or file_cfg.get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if name is not None:
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        _merge(cfg, copy.deepcopy(PRESETS[name]))
    _merge(cfg, file_cfg)
    for item in overrides:
        _merge(cfg, parse_override(item))
    cfg["preset"] = name
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
        cfg["data"]["seed"] = int(seed)
    validate(cfg)
    return cfg


def shared_ranks_of(cfg: dict) -> list[int]:
    m = cfg["model"]
    if m["shared_ranks"] is not None:
        return [int(r) for r in m["shared_ranks"]]
    if m["rank_setting"] is not None:
        if m["rank_setting"] not in RANK_SETTINGS:
            raise ConfigError("model.rank_setting", f"unknown setting; choose from {', '.join(RANK_SETTINGS)}")
        return list(RANK_SETTINGS[m["rank_setting"]])
    return [int(m["rank"])] * int(m["n_experts"])


def molre_config(cfg: dict) -> MoLREConfig:
    m = cfg["model"]
    ranks = shared_ranks_of(cfg)
    try:
        return MoLREConfig(
            d=int(m["d"]),
            n_experts=len(ranks) if m["rank_setting"] or m["shared_ranks"] else int(m["n_experts"]),
            top_k=int(m["top_k"]),
            shared_ranks=ranks,
            task_rank=int(m["task_rank"]),
            kernel_sizes=tuple(m["kernel_sizes"]),
            num_blocks=int(m["num_blocks"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from None


def fusion_config(cfg: dict) -> FusionConfig:
    f = cfg["fusion"]
    try:
        return FusionConfig(d=int(cfg["model"]["d"]), n_layers=int(f["n_layers"]), d_ff=f["d_ff"], n_heads=int(f["n_heads"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError("fusion", str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "val_fraction"}
    try:
        for k in ("learning_rate", "weight_decay"):
            t[k] = float(t[k])
        return TrainConfig(**t)
    except (ValueError, TypeError) as exc:
        raise ConfigError("train", str(exc)) from None


def dataset_config(cfg: dict) -> DatasetConfig:
    d = {k: v for k, v in cfg["data"].items() if k != "features_path"}
    try:
        return DatasetConfig(d=int(cfg["model"]["d"]), n_classes=int(cfg["n_classes"]), **d)
    except (ValueError, TypeError) as exc:
        raise ConfigError("data", str(exc)) from None


def validate(cfg: dict) -> None:
    if cfg["variant"] not in VARIANTS:
        raise ConfigError("variant", f"unknown variant {cfg['variant']!r}; choose from {', '.join(VARIANTS)}")
    if cfg["model"]["d"] % 4:
        raise ConfigError("model.d", f"must be divisible by 4, got {cfg['model']['d']}")
    if not 0.0 <= float(cfg["train"]["val_fraction"]) < 1.0:
        raise ConfigError("train.val_fraction", "must lie in [0, 1)")
    molre_config(cfg)
    fusion_config(cfg)
    train_config(cfg)
    dataset_config(cfg)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
