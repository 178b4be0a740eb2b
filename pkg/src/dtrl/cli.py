"""Command-line entry point.

Subcommands: gen-data, calibrate, pretrain, finetune, evaluate, ablate,
plot. Exit codes: 0 success, 1 usage error, 2 runtime failure. Runtime
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .ablate import ABLATION_PRESETS, run_ablation
from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .config import config_hash, load_config
from .datasets import dataset_digest, load_dataset, save_dataset
from .envs import calibrate_refs, generate_offline_dataset, make_env
from .grpo import grpo_dt_train
from .metrics import init_run_dir, write_metrics
from .nets import DTPolicy, ValueMLP
from .ppo import ppo_dt_train
from .pretrain import evaluate, pretrain_dt
from .presets import preset_config
from .qguided import qguided_train
from .seeding import child_seed
from .svgplot import plot_metrics


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtrl", description="Train and probe return-conditioned policies.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", required=True, choices=["dense", "sparse"])
    g.add_argument("--quality", required=True, choices=["random", "medium", "expert"])
    g.add_argument("--size", type=int, default=10000, help="minimum transition count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--encoding", choices=["binary", "json"], default="binary")

    c = sub.add_parser("calibrate", help="print score-normalization reference returns")
    c.add_argument("--env", required=True, choices=["dense", "sparse"])
    c.add_argument("--episodes", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("pretrain", help="behavior-clone a policy on a dataset")
    t.add_argument("--config", help="config file (defaults to the env's preset)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--metrics", help="optional pretraining metrics CSV")

    f = sub.add_parser("finetune", help="online finetuning from a checkpoint")
    f.add_argument("algo", choices=["grpo", "ppo", "qguided"])
    f.add_argument("--config", help="config file (defaults to the env's preset)")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True, help="run directory to create")
    f.add_argument("--iterations", type=int, default=200)
    f.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("evaluate", help="normalized score of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, choices=["dense", "sparse"])
    e.add_argument("--g", type=float, required=True, help="target return-to-go")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=["mean", "sample"], default="mean")

    a = sub.add_parser("ablate", help="paired ablation runs writing metrics CSVs")
    a.add_argument("preset", choices=list(ABLATION_PRESETS))
    a.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--iterations", type=int, default=20)
    a.add_argument("--config", help="base config file (defaults to the dense preset)")
    a.add_argument("--transitions", type=int, default=4000, help="pretraining dataset size")

    pl = sub.add_parser("plot", help="chart a metrics column across CSVs")
    pl.add_argument("csvs", nargs="+", help="metrics CSV files")
    pl.add_argument("--out", required=True, help="SVG file to write")
    pl.add_argument("--column", default="eval_score_mean")
    pl.add_argument("--x-column", default="iteration")
    pl.add_argument("--title", default="")
    return p


def _load_cfg(path: str | None, env_name: str):
    if path is not None:
        return load_config(path)
    return preset_config(env_name)


def _cmd_gen_data(args) -> int:
    env = make_env(args.env)
    trajs = generate_offline_dataset(env, args.quality, args.size, args.seed)
    out = save_dataset(args.out, trajs, env.spec, encoding=args.encoding)
    print(f"wrote {len(trajs)} trajectories to {out} (digest {dataset_digest(out)[:12]})")
    return 0


def _cmd_calibrate(args) -> int:
    env = make_env(args.env)
    ref_random, ref_expert = calibrate_refs(env, args.episodes, args.seed)
    print(f"ref_random_return = {ref_random!r}")
    print(f"ref_expert_return = {ref_expert!r}")
    return 0


def _cmd_pretrain(args) -> int:
    dataset, header = load_dataset(args.data)
    cfg = _load_cfg(args.config, header["env"])
    if cfg.env_name != header["env"]:
        raise RuntimeError(
            f"config env {cfg.env_name!r} does not match dataset env {header['env']!r}"
        )
    env = cfg.make_env()
    torch.manual_seed(child_seed(args.seed, "model-init"))
    policy = DTPolicy(cfg.model_config(env.spec.obs_dim, env.spec.action_dim))
    rows = pretrain_dt(policy, dataset, cfg.pretrain_config(), seed=args.seed)
    save_checkpoint(
        args.out,
        policy,
        extra={"env": cfg.env_name, "config_hash": config_hash(cfg), "seed": args.seed},
    )
    if args.metrics:
        write_metrics(
            args.metrics,
            rows,
            meta={"config_hash": config_hash(cfg), "seed": args.seed, "stage": "pretrain"},
        )
    print(f"wrote checkpoint {args.out} (digest {checkpoint_digest(args.out)[:12]})")
    return 0


def _cmd_finetune(args) -> int:
    policy, extra = load_checkpoint(args.checkpoint)
    env_name = extra.get("env", "dense")
    cfg = _load_cfg(args.config, env_name)
    env = cfg.make_env()
    calibrate_refs(env, seed=0)
    run_dir = init_run_dir(
        args.out,
        cfg.serialize(),
        args.seed,
        {"checkpoint": checkpoint_digest(args.checkpoint), "config": config_hash(cfg)},
    )
    meta = {
        "algo": args.algo,
        "config_hash": config_hash(cfg),
        "seed": args.seed,
        "checkpoint": checkpoint_digest(args.checkpoint)[:12],
    }
    if args.algo == "grpo":
        rows = grpo_dt_train(env, policy, cfg.grpo_config(), args.iterations, args.seed)
    elif args.algo == "ppo":
        pcfg = cfg.ppo_config()
        torch.manual_seed(child_seed(args.seed, "value-init"))
        vnet = ValueMLP(env.spec.obs_dim, pcfg.value_hidden, pcfg.value_layer_norm)
        rows = ppo_dt_train(env, policy, vnet, pcfg, args.iterations, args.seed)
    else:
        rows = qguided_train(env, policy, cfg.qguided_config(), args.iterations, args.seed)
    csv = write_metrics(run_dir / "metrics.csv", rows, meta=meta)
    save_checkpoint(run_dir / "final.ckpt", policy, extra={"env": cfg.env_name})
    last = rows[-1]["eval_score_mean"] if rows else float("nan")
    print(f"wrote {csv} ({len(rows)} iterations, final score {last:.2f})")
    return 0


def _cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        raise RuntimeError(f"checkpoint not found: {args.checkpoint}")
    policy, _ = load_checkpoint(args.checkpoint)
    env = make_env(args.env)
    calibrate_refs(env, seed=0)
    mean, std = evaluate(
        policy, env, args.g, args.episodes, mode=args.mode, seed=args.seed
    )
    print(f"normalized score: {mean:.3f} +- {std:.3f} over {args.episodes} episodes")
    return 0


def _cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else None
    seeds = list(range(args.seeds))

    def progress(preset, variant, seed, rows):
        last = rows[-1]["eval_score_mean"] if rows else float("nan")
        print(f"[{preset}] {variant} seed {seed}: final score {last:.2f}")

    paths = run_ablation(
        args.preset,
        seeds,
        args.out,
        args.iterations,
        base=base,
        data_transitions=args.transitions,
        progress=progress,
    )
    print(f"wrote {len(paths)} metrics files under {Path(args.out) / args.preset}")
    return 0


def _cmd_plot(args) -> int:
    out = plot_metrics(args.csvs, args.column, args.out, x_column=args.x_column, title=args.title)
    print(f"wrote {out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "calibrate": _cmd_calibrate,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (KeyboardInterrupt, BrokenPipeError):
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
