"""Clipped token-ratio finetuning with a learned state-value baseline.

One iteration: roll out K full episodes under rtg conditioning, recompute
per-step advantages for every replayed episode with generalized advantage
estimation against the current value net, sample fixed-length training
windows from the replay, and update the policy with a per-token clipped
importance objective plus the same KL-to-reference penalty and entropy
floor used by the group-relative loop. The value net regresses onto
targets frozen before the updates. Return-to-go tokens are the rollout
values the behavior policy actually saw; nothing is relabeled.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .dual import EntropyDual, update_dual
from .envs import Env
from .gaussian import gaussian_entropy, gaussian_kl, gaussian_log_prob
from .grpo import LOG_RATIO_BOUND, maybe_update_reference, rollout_full
from .nets import DTPolicy, ValueMLP
from .pretrain import evaluate
from .seeding import child_seed, rng
from .trajectory import TrajBuffer, Trajectory, sample_trajectories


@dataclass
class PpoConfig:
    g_online: float
    k_ppo: int = 8  # full rollouts per iteration; replay holds 4x this
    eps_clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    beta_kl: float = 1e-3
    rho: float | None = None
    kappa_init: float = 0.1
    kappa_lr: float = 3e-4
    c_train: int = 8  # training window length
    n_batch: int = 256
    n_passes: int = 4  # update passes over the iteration's window batch
    policy_lr: float = 5e-5
    value_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    context_len: int = 1  # rollout/eval conditioning window
    value_hidden: int = 64
    value_layer_norm: bool = False
    ref_update_period: int = 4
    eval_episodes: int = 10
    eval_mode: str = "mean"

    @property
    def replay_capacity(self) -> int:
        return 4 * self.k_ppo

    def __post_init__(self):
        if self.k_ppo < 1:
            raise ValueError("k_ppo must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.eps_clip <= 0.0:
            raise ValueError("eps_clip must be positive")
        if self.c_train < 1:
            raise ValueError("c_train must be >= 1")
        if self.n_batch < 2:
            raise ValueError("n_batch must be >= 2")
        if self.n_passes < 1:
            raise ValueError("n_passes must be >= 1")


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Advantage per step by the backward recursion.

    values must hold one entry per state plus the bootstrap for the state
    after the last reward (zero when the episode truly terminated).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError("values must be one longer than rewards")
    T = rewards.shape[0]
    adv = np.zeros(T, dtype=np.float64)
    running = 0.0
    for h in range(T - 1, -1, -1):
        delta = rewards[h] + gamma * values[h + 1] - values[h]
        running = delta + gamma * lam * running
        adv[h] = running
    return adv


def normalize_batch_advantages(adv: np.ndarray) -> np.ndarray:
    """Standardize across the whole batch (population std + 1e-8 guard)."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ValueError("need at least 2 advantages to normalize")
    if adv.max() == adv.min():
        return np.zeros_like(adv)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class WindowBatch:
    """Rectangular training windows cut from replayed episodes.

    Everything is (B, L)-shaped: rtg tokens in rollout form, observations,
    the actions taken, log-probs of those actions under the iteration's
    behavior snapshot, normalized advantages, and frozen value targets.
    """

    rtgs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    behavior_logprobs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray

    def __len__(self) -> int:
        return self.rtgs.shape[0]


def window_token_dists(
    policy: DTPolicy, rtgs: torch.Tensor, states: torch.Tensor, actions: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token Gaussian parameters for (B, L) windows, teacher-forced.

    Token i is conditioned on the window prefix: rtg/state pairs up to i
    and the actions before i. Returns (mean, var), each (B, L, action_dim).
    """
    return policy(rtgs, states, actions[:, :-1])


def trajectory_values(vnet: ValueMLP, traj: Trajectory) -> np.ndarray:
    """V at every visited state plus the bootstrap for the final state.

    The bootstrap is zero when the episode terminated for real; after a
    horizon truncation it is the value of the final state.
    """
    with torch.no_grad():
        obs = torch.from_numpy(np.ascontiguousarray(traj.states))
        vals = vnet(obs).numpy()
        if traj.terminated:
            tail = 0.0
        else:
            fin = torch.from_numpy(traj.final_state[None])
            tail = float(vnet(fin)[0])
    return np.concatenate([vals, [tail]])


def build_window_batch(
    replay: TrajBuffer,
    snapshot: DTPolicy,
    vnet: ValueMLP,
    cfg: PpoConfig,
    g: np.random.Generator,
) -> WindowBatch | None:
    """Sample the iteration's training windows and freeze their targets.

    Advantages are recomputed for every replayed episode with the current
    value net, then one uniform window per sampled episode is cut. Window
    advantages are normalized across the batch; value targets keep the raw
    advantages. Episodes shorter than the window length are skipped.
    """
    L = cfg.c_train
    eligible = [t for t in replay.items() if len(t) >= L]
    if not eligible:
        return None
    pool = TrajBuffer(len(eligible))
    for t in eligible:
        pool.push(t)
    adv_by_id: dict[int, np.ndarray] = {}
    val_by_id: dict[int, np.ndarray] = {}
    for t in eligible:
        vals = trajectory_values(vnet, t)
        adv_by_id[id(t)] = gae(t.rewards, vals, cfg.gamma, cfg.lam)
        val_by_id[id(t)] = vals
    parents = sample_trajectories(pool, cfg.n_batch, g)
    rtgs, states, actions, advs, vtarg = [], [], [], [], []
    for t in parents:
        h = int(g.integers(0, len(t) - L + 1))
        rtgs.append(t.rtgs[h : h + L])
        states.append(t.states[h : h + L])
        actions.append(t.actions[h : h + L])
        a = adv_by_id[id(t)][h : h + L]
        advs.append(a)
        vtarg.append(a + val_by_id[id(t)][h : h + L])
    advs = np.stack(advs)
    batch = WindowBatch(
        rtgs=np.stack(rtgs),
        states=np.stack(states),
        actions=np.stack(actions),
        behavior_logprobs=np.zeros_like(advs),
        advantages=normalize_batch_advantages(advs),
        value_targets=np.stack(vtarg),
    )
    with torch.no_grad():
        mean, var = window_token_dists(
            snapshot,
            torch.from_numpy(batch.rtgs),
            torch.from_numpy(batch.states),
            torch.from_numpy(batch.actions),
        )
        lp = gaussian_log_prob(mean, var, torch.from_numpy(batch.actions))
    batch.behavior_logprobs = lp.numpy()
    return batch


def ppo_loss(
    policy: DTPolicy,
    ref: DTPolicy,
    batch: WindowBatch,
    cfg: PpoConfig,
    dual: EntropyDual,
) -> tuple[torch.Tensor, dict]:
    """Token-level clipped surrogate plus KL penalty and entropy bonus."""
    rtgs = torch.from_numpy(batch.rtgs)
    states = torch.from_numpy(batch.states)
    actions = torch.from_numpy(batch.actions)
    mean, var = window_token_dists(policy, rtgs, states, actions)
    token_lp = gaussian_log_prob(mean, var, actions)
    behavior = torch.from_numpy(batch.behavior_logprobs)
    log_w = torch.clamp(token_lp - behavior, -LOG_RATIO_BOUND, LOG_RATIO_BOUND)
    w = torch.exp(log_w)
    adv = torch.from_numpy(batch.advantages)
    clipped = torch.clamp(w, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip)
    surrogate = -torch.minimum(w * adv, clipped * adv).mean()
    with torch.no_grad():
        ref_mean, ref_var = window_token_dists(ref, rtgs, states, actions)
    kl = gaussian_kl(mean, var, ref_mean, ref_var).mean()
    entropy = gaussian_entropy(var).mean()
    loss = surrogate + cfg.beta_kl * kl - dual.kappa * entropy
    stats = {
        "surrogate": float(surrogate.detach()),
        "kl_to_ref": float(kl.detach()),
        "mean_entropy": float(entropy.detach()),
        "mean_ratio": float(w.detach().mean()),
        "log_ratios": log_w.detach().reshape(-1).numpy(),
        "kappa": dual.kappa,
    }
    return loss, stats


def value_loss(vnet: ValueMLP, states: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error against targets frozen before the update."""
    return ((vnet(states) - targets) ** 2).mean()


def ppo_dt_train(
    env: Env,
    policy: DTPolicy,
    vnet: ValueMLP,
    cfg: PpoConfig,
    iterations: int,
    seed: int,
    on_iteration=None,
) -> list[dict]:
    """Run the finetuning loop; returns one metrics row per iteration.

    env_steps_cumulative counts rollout transitions; evaluation episodes
    are measurement and excluded. grad_updates_cumulative counts policy
    and value optimizer steps together.
    """
    policy.eval()
    rho = -policy.cfg.action_dim if cfg.rho is None else cfg.rho
    dual = EntropyDual(rho=rho, kappa_init=cfg.kappa_init, lr=cfg.kappa_lr)
    ref = copy.deepcopy(policy)
    popt = torch.optim.AdamW(
        policy.parameters(), lr=cfg.policy_lr, weight_decay=cfg.weight_decay
    )
    vopt = torch.optim.AdamW(
        vnet.parameters(), lr=cfg.value_lr, weight_decay=cfg.weight_decay
    )
    replay = TrajBuffer(cfg.replay_capacity)
    metrics: list[dict] = []
    env_steps = 0
    grad_updates = 0
    policy_updates = 0
    for it in range(iterations):
        snapshot = copy.deepcopy(policy)
        snapshot.eval()
        for r in range(cfg.k_ppo):
            traj = rollout_full(
                env, snapshot, cfg.g_online, child_seed(seed, "rollout", it, r), cfg.context_len
            )
            replay.push(traj)
            env_steps += len(traj)
        batch = build_window_batch(replay, snapshot, vnet, cfg, rng(seed, "windows", it))
        ratios, log_ratios, ents, kls, kappas, vlosses = [], [], [], [], [], []
        if batch is not None:
            vstates = torch.from_numpy(
                batch.states.reshape(-1, batch.states.shape[-1])
            )
            vtargets = torch.from_numpy(batch.value_targets.reshape(-1))
            for _ in range(cfg.n_passes):
                loss, stats = ppo_loss(policy, ref, batch, cfg, dual)
                popt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
                popt.step()
                grad_updates += 1
                policy_updates += 1
                maybe_update_reference(ref, policy, policy_updates, cfg.ref_update_period)
                update_dual(dual, stats["mean_entropy"])
                vloss = value_loss(vnet, vstates, vtargets)
                vopt.zero_grad()
                vloss.backward()
                torch.nn.utils.clip_grad_norm_(vnet.parameters(), cfg.grad_clip)
                vopt.step()
                grad_updates += 1
                ratios.append(stats["mean_ratio"])
                log_ratios.append(stats["log_ratios"])
                ents.append(stats["mean_entropy"])
                kls.append(stats["kl_to_ref"])
                kappas.append(stats["kappa"])
                vlosses.append(float(vloss.detach()))
        eval_mean, eval_std = evaluate(
            policy,
            env,
            cfg.g_online,
            cfg.eval_episodes,
            mode=cfg.eval_mode,
            seed=child_seed(seed, "eval", it),
            context_len=cfg.context_len,
        )
        pooled = np.concatenate(log_ratios) if log_ratios else np.zeros(1)
        row = {
            "iteration": it,
            "env_steps_cumulative": env_steps,
            "grad_updates_cumulative": grad_updates,
            "eval_score_mean": eval_mean,
            "eval_score_std": eval_std,
            "mean_entropy": float(np.mean(ents)) if ents else 0.0,
            "kappa": kappas[-1] if kappas else dual.kappa,
            "mean_ratio": float(np.mean(ratios)) if ratios else 1.0,
            "ratio_log_variance": float(pooled.var()),
            "kl_to_ref": float(np.mean(kls)) if kls else 0.0,
            "groups_kept": 0,
            "groups_dropped": 0,
            "value_loss": float(np.mean(vlosses)) if vlosses else 0.0,
        }
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return metrics
