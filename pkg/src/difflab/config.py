"""Run configuration: JSON-backed, fully serializable, hashed for artifact
provenance. Defaults mirror the experimental settings the package targets
(30 evaluation timesteps, zero guidance for classification, degree-3
polynomial for low-shot reweighting at lr 0.05 for 5000 epochs)."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .validation import ConfigError

CACHE_ENV = "DIFFLAB_CACHE"


def default_config() -> dict:
    return {
        "seed": 0,
        "styles": ["flat", "noir"],
        "kind": "rf",
        "dataset": {
            "tasks": {"single_object": 700, "position": 700, "colors": 700},
            "allow_distractors": False,
        },
        "train": {
            "steps": 12000,
            "batch_size": 64,
            "lr": 1e-3,
            "hidden": 256,
            "emb_dim": 64,
            "time_dim": 16,
            "t_sampling": "uniform",
            "loss_weighting": "uniform",
            "p_uncond": 0.1,
        },
        "eval_set": {"n_timesteps": 30, "bias": "uniform"},
        "bench": {
            "tasks": {"single_object": 30, "position": 20, "colors": 20},
            "images_per_prompt": 4,
            "sample_steps": 60,
            "guidance_scale": 0.0,
        },
        "fit": {
            "epochs": 5000,
            "lr": 0.05,
            "degree": 3,
            "lowshot_fractions": [0.05, 0.05, 0.90],
        },
        "score": {"metric": "l2"},
        "threads": 1,
    }


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = merge_config(cfg, user)
    if overrides:
        cfg = merge_config(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def run_dir(cfg: dict, root=None) -> Path:
    if root is None:
        root = os.environ.get(CACHE_ENV, "runs")
    return Path(root) / config_hash(cfg)
