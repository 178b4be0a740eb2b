"""Offline pretraining and policy evaluation.

Pretraining minimizes the per-step action NLL on context windows drawn
from the offline dataset (trajectories length-weighted, window end
uniform within the trajectory), with the same entropy constraint the
online finetuners use. Evaluation rolls the policy with return-to-go
conditioning decremented by the realized rewards and reports normalized
scores against the calibrated references.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dual import EntropyDual
from .envs import Env, normalized_score, scripted_policy
from .gaussian import GaussianDist, gaussian_entropy, gaussian_log_prob
from .nets import DTPolicy, contexts_forward
from .seeding import child_seed, rng
from .trajectory import (
    Context,
    ContextTrail,
    TrajBuffer,
    Trajectory,
    rollout_rtg_update,
    sample_trajectories,
    window,
)


@dataclass
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 64
    context_len: int = 20  # c_offline: 20 dense, 5 sparse
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    kappa_init: float = 0.1
    kappa_lr: float = 3e-4
    rho: float | None = None  # defaults to -action_dim
    use_mse: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.context_len < 1:
            raise ValueError("batch_size and context_len must be positive")


def _sample_windows(
    dataset_buf: TrajBuffer, n: int, m: int, g: np.random.Generator
) -> tuple[list[Context], np.ndarray]:
    trajs = sample_trajectories(dataset_buf, n, g)
    contexts, targets = [], []
    for t in trajs:
        h = int(g.integers(0, len(t)))
        contexts.append(window(t, h, m))
        targets.append(t.actions[h])
    return contexts, np.stack(targets)


def pretrain_dt(
    policy: DTPolicy,
    dataset: list[Trajectory],
    cfg: PretrainConfig,
    seed: int,
) -> list[dict]:
    """Train in place; returns one metrics row per gradient step."""
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg.steps == 0:
        return []
    torch.manual_seed(child_seed(seed, "pretrain-torch"))
    buf = TrajBuffer(len(dataset))
    for t in dataset:
        buf.push(t)
    rho = -policy.cfg.action_dim if cfg.rho is None else cfg.rho
    dual = EntropyDual(rho=rho, kappa_init=cfg.kappa_init, lr=cfg.kappa_lr)
    opt = torch.optim.AdamW(
        policy.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    policy.train()
    rows = []
    for step in range(cfg.steps):
        g = rng(seed, "pretrain", step)
        contexts, targets = _sample_windows(buf, cfg.batch_size, cfg.context_len, g)
        mean, var = contexts_forward(policy, contexts)
        target_t = torch.from_numpy(targets)
        if cfg.use_mse:
            fit = ((mean - target_t) ** 2).sum(dim=-1).mean()
        else:
            fit = -gaussian_log_prob(mean, var, target_t).mean()
        entropy = gaussian_entropy(var).mean()
        loss = fit + dual.kappa * (rho - entropy)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
        opt.step()
        kappa = dual.update(float(entropy.detach()))
        rows.append(
            {
                "step": step,
                "loss": float(loss.detach()),
                "nll": float(fit.detach()),
                "mean_entropy": float(entropy.detach()),
                "kappa": kappa,
            }
        )
    policy.eval()
    return rows


def dataset_nll(
    policy: DTPolicy, dataset: list[Trajectory], cfg: PretrainConfig, seed: int, n: int = 512
) -> float:
    """Mean per-step NLL on freshly sampled windows; no parameter updates."""
    buf = TrajBuffer(len(dataset))
    for t in dataset:
        buf.push(t)
    g = rng(seed, "heldout-nll")
    contexts, targets = _sample_windows(buf, n, cfg.context_len, g)
    was_training = policy.training
    policy.eval()
    with torch.no_grad():
        mean, var = contexts_forward(policy, contexts)
        nll = -gaussian_log_prob(mean, var, torch.from_numpy(targets)).mean()
    if was_training:
        policy.train()
    return float(nll)


class ScriptedActor:
    """A scripted controller behind the policy interface, for calibration checks."""

    def __init__(self, env_spec, kind: str):
        self._fn = scripted_policy(env_spec, kind)
        self._d = env_spec.d_pos
        self.var = 1e-12

    def action_dists(self, contexts: list[Context]) -> tuple[torch.Tensor, torch.Tensor]:
        from .envs import EnvState

        means = []
        for c in contexts:
            obs = c.states[-1]
            state = EnvState(obs[: self._d].copy(), obs[self._d :].copy(), 0)
            means.append(self._fn(state, None))
        mean = torch.from_numpy(np.stack(means))
        return mean, torch.full_like(mean, self.var)


def evaluate(
    actor,
    env: Env,
    g_eval: float,
    n_episodes: int,
    mode: str = "mean",
    seed: int = 0,
    context_len: int | None = None,
) -> tuple[float, float]:
    """Mean and std of the normalized score over n_episodes rollouts.

    Episodes advance in lockstep so the policy is evaluated in batches.
    "mean" mode acts with the Gaussian mean, "sample" draws actions.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if context_len is not None:
        m = context_len
    elif hasattr(actor, "cfg"):
        m = actor.cfg.context_len
    else:
        raise ValueError("context_len is required for actors without a config")
    d = env.spec.action_dim

    envs = []
    trails = []
    gens = []
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    gs = np.full(n_episodes, float(g_eval))
    for i in range(n_episodes):
        e = Env(env.spec, teleport=env.teleport)
        state = e.reset(child_seed(seed, "eval-ep", i))
        envs.append(e)
        trail = ContextTrail(m, d)
        trail.begin_step(gs[i], state.observation())
        trails.append(trail)
        gens.append(rng(seed, "eval-act", i))

    while alive.any():
        idx = np.flatnonzero(alive)
        contexts = [trails[i].context() for i in idx]
        mean, var = actor.action_dists(contexts)
        for slot, i in enumerate(idx):
            dist = GaussianDist(mean[slot], var[slot])
            a = dist.mode() if mode == "mean" else dist.sample(gens[i])
            action = a.numpy()
            res = envs[i].step(action)
            returns[i] += res.reward
            trails[i].push_action(action)
            if res.done:
                alive[i] = False
            else:
                gs[i] = rollout_rtg_update(gs[i], res.reward)
                trails[i].begin_step(gs[i], res.state.observation())

    scores = np.array([normalized_score(env.spec, r) for r in returns])
    return float(scores.mean()), float(scores.std())
