"""Group-relative finetuning scored by a learned critic instead of resets.

Some platforms cannot teleport the environment to a stored state. This
variant keeps the group-relative loop but evaluates a group by sampling G
candidate actions at a (state, rtg) pair and scoring each with a critic:
the candidate's reward is Q(s, a), standing in for the discounted return
a reset-based rollout would have measured. Twin critics are trained on
replayed transitions with clipped-noise bootstrap targets and Polyak
target tracking. The optimized unit is the single action token.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .dual import EntropyDual, update_dual
from .envs import Env
from .gaussian import GaussianDist
from .grpo import (
    group_advantages,
    grpo_loss,
    maybe_update_reference,
    rollout_full,
    sample_reset_points,
)
from .nets import DTPolicy, TwinQ
from .pretrain import evaluate
from .seeding import child_seed, rng
from .trajectory import (
    Context,
    SubTrajBuffer,
    SubTrajRecord,
    TrajBuffer,
    Trajectory,
    sample_subtrajectories,
    sample_trajectories,
    window,
)

ACTION_BOUND = 1.0


@dataclass
class QguidedConfig:
    g_online: float
    group_size: int = 8
    reset_points: int = 4
    eps_clip: float = 0.2
    beta_kl: float = 1e-3
    rho: float | None = None
    kappa_init: float = 1e-2
    kappa_lr: float = 3e-4
    delta_r: float = 0.0
    lr: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    context_len: int = 1
    rollouts_per_iter: int = 1
    parents_per_iter: int = 16
    n_batch: int = 256
    n_epochs: int = 8
    traj_capacity: int = 32
    sub_capacity: int = 2048
    ref_update_period: int = 4
    eval_episodes: int = 10
    eval_mode: str = "mean"
    active_sampling: bool = True
    use_sequence_ratio: bool = True
    use_geometric_mean: bool = False
    # critic side
    q_gamma: float = 0.99
    tau_polyak: float = 0.005
    target_noise: float = 0.2
    noise_clip: float = 0.5
    q_lr: float = 1e-3
    q_hidden: int = 64
    q_batch: int = 256
    q_updates_per_iter: int = 100
    transition_capacity: int = 100_000

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.reset_points < 1:
            raise ValueError("reset_points must be >= 1")
        if self.eps_clip <= 0.0:
            raise ValueError("eps_clip must be positive")
        if not 0.0 < self.q_gamma <= 1.0:
            raise ValueError("q_gamma must be in (0, 1]")
        if not 0.0 < self.tau_polyak <= 1.0:
            raise ValueError("tau_polyak must be in (0, 1]")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    next_rtg: float
    done: float


def trajectory_transitions(traj: Trajectory) -> list[Transition]:
    """Flatten an episode into critic training tuples.

    done marks true termination only; a horizon truncation keeps done=0 so
    the bootstrap continues through the final state. next_rtg is the
    conditioning the policy would see at the next state (rollout form).
    """
    out = []
    T = len(traj)
    for h in range(T):
        if h + 1 < T:
            nxt = traj.states[h + 1]
            g2 = traj.rtgs[h + 1]
            done = 0.0
        else:
            nxt = traj.final_state
            g2 = traj.rtgs[h] - traj.rewards[h]
            done = 1.0 if traj.terminated else 0.0
        out.append(
            Transition(
                state=traj.states[h],
                action=traj.actions[h],
                reward=float(traj.rewards[h]),
                next_state=nxt,
                next_rtg=float(g2),
                done=done,
            )
        )
    return out


def _batch_mean_actions(policy: DTPolicy, rtgs: np.ndarray, states: np.ndarray) -> torch.Tensor:
    """Mean policy action for a batch of single-step contexts."""
    with torch.no_grad():
        mean, _ = policy(
            torch.from_numpy(rtgs[:, None]),
            torch.from_numpy(states[:, None]),
            torch.zeros((len(rtgs), 0, policy.cfg.action_dim), dtype=torch.float64),
        )
    return mean[:, 0]


def td3_update(
    critics: TwinQ,
    targets: TwinQ,
    policy: DTPolicy,
    batch: list[Transition],
    cfg: QguidedConfig,
    opt: torch.optim.Optimizer,
    g: np.random.Generator,
) -> float:
    """One critic regression step onto clipped-noise bootstrap targets.

    The next action is the policy mean at (next_rtg, next_state) plus
    clipped Gaussian noise, clamped to the action bounds; both critics
    regress onto the min of the target twins. Target nets then take a
    Polyak step toward the live critics. Returns the summed critic loss.
    """
    if not batch:
        raise ValueError("transition batch must be nonempty")
    s = torch.from_numpy(np.stack([t.state for t in batch]))
    a = torch.from_numpy(np.stack([t.action for t in batch]))
    r = torch.from_numpy(np.array([t.reward for t in batch]))
    s2 = np.stack([t.next_state for t in batch])
    g2 = np.array([t.next_rtg for t in batch])
    done = torch.from_numpy(np.array([t.done for t in batch]))
    with torch.no_grad():
        a2 = _batch_mean_actions(policy, g2, s2)
        noise = torch.from_numpy(
            g.normal(0.0, cfg.target_noise, size=tuple(a2.shape))
        ).clamp(-cfg.noise_clip, cfg.noise_clip)
        a2 = (a2 + noise).clamp(-ACTION_BOUND, ACTION_BOUND)
        tq1, tq2 = targets(torch.from_numpy(s2), a2)
        y = r + cfg.q_gamma * (1.0 - done) * torch.minimum(tq1, tq2)
    q1, q2 = critics(s, a)
    loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        for tp, p in zip(targets.parameters(), critics.parameters()):
            tp.mul_(1.0 - cfg.tau_polyak).add_(cfg.tau_polyak * p)
    return float(loss.detach())


def q_group_advantages(
    policy: DTPolicy,
    q1,
    ctx: Context,
    G: int,
    delta_r: float,
    g: np.random.Generator,
) -> tuple[list[SubTrajRecord], np.ndarray, np.ndarray]:
    """Score G sampled candidate actions by the critic and normalize.

    Returns single-step records (with frozen behavior log-probs), the
    group advantages, and the keep mask; normalization goes through the
    same code path the reset-based loop uses.
    """
    dist = policy.dist(ctx)
    acts = [dist.sample(g) for _ in range(G)]
    s_h = ctx.states[-1]
    with torch.no_grad():
        obs = torch.from_numpy(np.tile(s_h, (G, 1)))
        rewards = q1(obs, torch.stack(acts)).numpy().astype(np.float64)
    adv, keep = group_advantages(rewards, delta_r)
    records = []
    for i, a in enumerate(acts):
        lp = float(dist.log_prob(a))
        records.append(
            SubTrajRecord(
                parent_rtgs=ctx.rtgs[:-1].copy(),
                parent_states=ctx.states[:-1].copy(),
                parent_actions=ctx.actions.copy(),
                reset_state=s_h.copy(),
                reset_rtg=float(ctx.rtgs[-1]),
                rtgs=np.array([ctx.rtgs[-1]]),
                states=s_h[None].copy(),
                actions=a.numpy()[None],
                behavior_token_logprobs=np.array([lp]),
                behavior_seq_logprob=lp,
                eval_return=float(rewards[i]),
                advantage=float(adv[i]),
            )
        )
    return records, adv, keep


def qguided_train(
    env: Env,
    policy: DTPolicy,
    cfg: QguidedConfig,
    iterations: int,
    seed: int,
    on_iteration=None,
) -> list[dict]:
    """Run the critic-scored finetuning loop; one metrics row per iteration.

    Never touches the teleport reset: groups are hypothetical, so
    env_steps_cumulative counts rollout transitions only.
    grad_updates_cumulative counts policy and critic optimizer steps.
    """
    policy.eval()
    rho = -policy.cfg.action_dim if cfg.rho is None else cfg.rho
    dual = EntropyDual(rho=rho, kappa_init=cfg.kappa_init, lr=cfg.kappa_lr)
    ref = copy.deepcopy(policy)
    opt = torch.optim.AdamW(policy.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    torch.manual_seed(child_seed(seed, "critic-init"))
    critics = TwinQ(env.spec.obs_dim, env.spec.action_dim, cfg.q_hidden)
    targets = copy.deepcopy(critics)
    for p in targets.parameters():
        p.requires_grad_(False)
    qopt = torch.optim.AdamW(critics.parameters(), lr=cfg.q_lr, weight_decay=cfg.weight_decay)
    replay = TrajBuffer(cfg.traj_capacity)
    transitions = TrajBuffer(cfg.transition_capacity)
    sub = SubTrajBuffer(cfg.sub_capacity)
    metrics: list[dict] = []
    env_steps = 0
    grad_updates = 0
    policy_updates = 0
    for it in range(iterations):
        snapshot = copy.deepcopy(policy)
        snapshot.eval()
        for r in range(cfg.rollouts_per_iter):
            traj = rollout_full(
                env, snapshot, cfg.g_online, child_seed(seed, "rollout", it, r), cfg.context_len
            )
            replay.push(traj)
            env_steps += len(traj)
            for tr in trajectory_transitions(traj):
                transitions.push(tr)
        pool = transitions.items()
        g_q = rng(seed, "critic-batch", it)
        q_losses = []
        mean_qs = []
        for u in range(cfg.q_updates_per_iter):
            idx = g_q.integers(0, len(pool), size=min(cfg.q_batch, len(pool)))
            batch = [pool[i] for i in idx]
            q_losses.append(
                td3_update(
                    critics, targets, snapshot, batch, cfg, qopt, rng(seed, "q-noise", it, u)
                )
            )
            with torch.no_grad():
                s = torch.from_numpy(np.stack([t.state for t in batch]))
                a = torch.from_numpy(np.stack([t.action for t in batch]))
                mean_qs.append(float(critics.q1(s, a).mean()))
        parents = sample_trajectories(replay, cfg.parents_per_iter, rng(seed, "parents", it))
        kept = dropped = 0
        for pi, parent in enumerate(parents):
            active = cfg.active_sampling and parent.action_vars is not None
            ks = sample_reset_points(parent, cfg.reset_points, active, rng(seed, "resets", it, pi))
            for j, k in enumerate(ks):
                ctx = window(parent, int(k), cfg.context_len)
                records, adv, keep = q_group_advantages(
                    snapshot,
                    critics.q1,
                    ctx,
                    cfg.group_size,
                    cfg.delta_r,
                    rng(seed, "group", it, pi, j),
                )
                if not keep.any():
                    dropped += 1
                    continue
                kept += 1
                for i, rec in enumerate(records):
                    if keep[i]:
                        rec.created_iter = it
                        sub.push(rec)
        ratios, log_ratios, ents, kls, kappas = [], [], [], [], []
        if len(sub) > 0:
            for epoch in range(cfg.n_epochs):
                batch = sample_subtrajectories(sub, cfg.n_batch, rng(seed, "batch", it, epoch))
                loss, stats = grpo_loss(policy, ref, batch, cfg, dual)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
                opt.step()
                grad_updates += 1
                policy_updates += 1
                maybe_update_reference(ref, policy, policy_updates, cfg.ref_update_period)
                update_dual(dual, stats["mean_entropy"])
                # same fresh-record diagnostic convention as the group trainer
                fresh = np.array([r.created_iter == it for r in batch], dtype=bool)
                ratios.append(stats["ratios"][fresh])
                log_ratios.append(stats["log_ratios"][fresh])
                ents.append(stats["mean_entropy"])
                kls.append(stats["kl_to_ref"])
                kappas.append(stats["kappa"])
        grad_updates += len(q_losses)
        eval_mean, eval_std = evaluate(
            policy,
            env,
            cfg.g_online,
            cfg.eval_episodes,
            mode=cfg.eval_mode,
            seed=child_seed(seed, "eval", it),
            context_len=cfg.context_len,
        )
        pooled_r = np.concatenate(ratios) if ratios else np.zeros(0)
        pooled_lr = np.concatenate(log_ratios) if log_ratios else np.zeros(0)
        row = {
            "iteration": it,
            "env_steps_cumulative": env_steps,
            "grad_updates_cumulative": grad_updates,
            "eval_score_mean": eval_mean,
            "eval_score_std": eval_std,
            "mean_entropy": float(np.mean(ents)) if ents else 0.0,
            "kappa": kappas[-1] if kappas else dual.kappa,
            "mean_ratio": float(pooled_r.mean()) if pooled_r.size else 1.0,
            "ratio_log_variance": float(pooled_lr.var()) if pooled_lr.size else 0.0,
            "kl_to_ref": float(np.mean(kls)) if kls else 0.0,
            "groups_kept": kept,
            "groups_dropped": dropped,
            "q_loss": float(np.mean(q_losses)) if q_losses else 0.0,
            "mean_q": float(np.mean(mean_qs)) if mean_qs else 0.0,
        }
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return metrics
