"""Paired ablation runs and the conditioning-instability report.

Each preset names a set of variants differing in exactly the toggled
knobs. For every seed the harness generates a random-quality dataset,
pretrains once, and then finetunes an identical copy of that pretrained
policy under every variant, so within a seed the variants differ only
in the toggle under study. Each run writes one annotated metrics CSV.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash
from .envs import EnvSpec, calibrate_refs, generate_offline_dataset
from .grpo import grpo_dt_train
from .metrics import write_metrics
from .nets import DTPolicy
from .pretrain import pretrain_dt
from .seeding import child_seed


def preset_variants(preset: str, spec: EnvSpec) -> dict[str, dict]:
    """Variant name -> config overrides (g_online routes to [env], rest to [grpo])."""
    if preset == "relabel":
        # conditioning target far below what the policy actually achieves,
        # so relabeled tokens differ sharply from the rollout tokens; at the
        # achievable target the two nearly coincide and the toggle is inert
        shared = {"g_online": 0.0}
        return {
            "relabel-on": {"use_hindsight_relabel": True, **shared},
            "relabel-off": dict(shared),
        }
    if preset == "fulltraj":
        # full-episode groups are only feasible from the episode start,
        # so most sampled reset points are discarded; that inefficiency
        # is the behavior under study. Smaller batches keep the long
        # full-episode segments affordable for both arms.
        shared = {"n_batch": 64, "n_epochs": 4}
        return {
            "fulltraj": {"l_traj": spec.horizon, "l_eval": 0, **shared},
            "subtraj": dict(shared),
        }
    if preset == "inconsistent":
        return {"inconsistent": {"consistent_states": False}, "consistent": {}}
    if preset == "tokenratio":
        return {"token-ratio": {"use_sequence_ratio": False}, "sequence-ratio": {}}
    if preset == "randomsample":
        return {"random-resets": {"active_sampling": False}, "active-resets": {}}
    if preset == "gmratio":
        return {"geometric-mean": {"use_geometric_mean": True}, "raw-sequence": {}}
    if preset == "ltraj-sweep":
        return {f"ltraj-{v}": {"l_traj": v} for v in (1, 2, 4, 8)}
    if preset == "leval-sweep":
        return {f"leval-{v}": {"l_eval": v} for v in (0, 4, 16, 32)}
    raise ValueError(f"unknown ablation preset {preset!r}")


ABLATION_PRESETS = (
    "relabel",
    "fulltraj",
    "inconsistent",
    "tokenratio",
    "randomsample",
    "gmratio",
    "ltraj-sweep",
    "leval-sweep",
)


def pretrained_policy(base: TrainConfig, seed: int, data_transitions: int):
    """Random-data pretrain shared by every variant of one seed."""
    env = base.make_env()
    calibrate_refs(env, seed=0)
    dataset = generate_offline_dataset(
        env, "random", data_transitions, seed=child_seed(seed, "ablate-data")
    )
    torch.manual_seed(child_seed(seed, "ablate-model"))
    policy = DTPolicy(base.model_config(env.spec.obs_dim, env.spec.action_dim))
    pretrain_dt(policy, dataset, base.pretrain_config(), seed=child_seed(seed, "ablate-pre"))
    return env, policy


def run_ablation(
    preset: str,
    seeds: list[int],
    out_dir: str | Path,
    iterations: int,
    base: TrainConfig | None = None,
    data_transitions: int = 4000,
    progress=None,
) -> list[Path]:
    """Run every variant for every seed; returns the CSV paths written."""
    from .presets import preset_config

    base = base if base is not None else preset_config("dense")
    out_dir = Path(out_dir)
    spec = base.make_env().spec
    variants = preset_variants(preset, spec)
    paths = []
    for seed in seeds:
        env, policy0 = pretrained_policy(base, seed, data_transitions)
        for variant, overrides in variants.items():
            # experiment-level knobs (like the RTG target) live in [env];
            # everything else is a [grpo] key
            env_over = {k: v for k, v in overrides.items() if k in base.sections["env"]}
            grpo_over = {k: v for k, v in overrides.items() if k not in env_over}
            cfg_full = TrainConfig(
                {
                    **{k: dict(v) for k, v in base.sections.items()},
                    "env": {**base.sections["env"], **env_over},
                    "grpo": {**base.sections["grpo"], **grpo_over},
                }
            )
            policy = copy.deepcopy(policy0)
            rows = grpo_dt_train(
                env,
                policy,
                cfg_full.grpo_config(),
                iterations,
                seed=child_seed(seed, "ablate-finetune", variant),
            )
            path = out_dir / preset / f"{variant}-seed{seed}.csv"
            write_metrics(
                path,
                rows,
                meta={
                    "preset": preset,
                    "variant": variant,
                    "seed": seed,
                    "config_hash": config_hash(cfg_full),
                },
            )
            paths.append(path)
            if progress is not None:
                progress(preset, variant, seed, rows)
    return paths


def iterations_to_threshold(
    rows: list[dict], threshold: float, column: str = "eval_score_mean"
) -> float:
    """First iteration whose score reaches the threshold, else inf."""
    for row in rows:
        if row[column] >= threshold:
            return float(row["iteration"])
    return math.inf


def relabel_instability_report(
    on_runs: list[list[dict]],
    off_runs: list[list[dict]],
    window: int | None = None,
) -> dict:
    """Compare ratio-spread between relabel-on and relabel-off runs.

    Each run contributes its median ratio_log_variance over the first
    `window` iterations (all iterations when None); the summary ratio is
    the median over on-runs divided by the median over off-runs. A zero
    off-median with a positive on-median is reported as "inf"; two zero
    medians compare as equal (ratio 1.0).
    """
    if not on_runs or not off_runs:
        raise ValueError("need at least one run per arm")

    def med(runs):
        vals = []
        for rows in runs:
            cut = rows[:window] if window is not None else rows
            vals.append(float(np.median([r["ratio_log_variance"] for r in cut])))
        return float(np.median(vals))

    on_median = med(on_runs)
    off_median = med(off_runs)
    if off_median == 0.0:
        ratio = 1.0 if on_median == 0.0 else "inf"
    else:
        ratio = on_median / off_median
    reproduced = ratio == "inf" or (isinstance(ratio, float) and ratio >= 2.0)
    return {
        "on_median": on_median,
        "off_median": off_median,
        "ratio": ratio,
        "reproduced": reproduced,
    }
