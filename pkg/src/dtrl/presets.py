"""Tuned desk-scale configurations for the two bundled environments.

These are starting points for the CLI and the ablation harness: small
enough to train on a laptop CPU in minutes, strong enough to recover
expert-level dense scores from a random-data pretrain.
"""

from __future__ import annotations

from .config import TrainConfig


def preset_config(name: str) -> TrainConfig:
    if name == "dense":
        return TrainConfig(
            {
                "env": {"name": "dense", "g_online": 10.0},
                "model": {"context_len": 10, "dropout": 0.1},
                "pretrain": {"steps": 1500, "batch_size": 32, "context_len": 10},
                "grpo": {"context_len": 1},
                "ppo": {"context_len": 1},
                "qguided": {"context_len": 1},
            }
        )
    if name == "sparse":
        return TrainConfig(
            {
                "env": {"name": "sparse", "g_online": 1.0},
                "model": {"context_len": 5, "dropout": 0.1},
                "pretrain": {"steps": 1500, "batch_size": 32, "context_len": 5},
                "grpo": {"context_len": 1, "gamma": 1.0, "l_eval": 32, "rollouts_per_iter": 5},
                "ppo": {"context_len": 1},
                "qguided": {"context_len": 1, "q_gamma": 1.0, "rollouts_per_iter": 5},
            }
        )
    raise ValueError(f"unknown preset {name!r} (expected 'dense' or 'sparse')")
