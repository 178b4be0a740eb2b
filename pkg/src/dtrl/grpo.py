"""Group-relative finetuning of the decision transformer.

One iteration: roll out full trajectories with the current policy, pick
reset points on replayed trajectories by action-variance (exploration
hotspots), teleport a group of G copies of the environment to the SAME
state, let each copy act stochastically for L_traj steps and then follow
the mean action for L_eval more steps, score each member by discounted
raw reward, and normalize scores within the group into advantages. The
stored segments then drive clipped importance-ratio updates against the
frozen behavior log-probs, with a KL penalty to a slowly updated
reference policy and an entropy floor enforced by a dual variable.

Return-to-go conditioning is never relabeled: the stored rtg tokens are
exactly the values the behavior policy was conditioned on while acting
(g at the reset point, decremented by realized rewards). The
`use_hindsight_relabel` flag exists only to reproduce the instability
this avoids.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .dual import EntropyDual, update_dual
from .envs import Env, EnvState
from .gaussian import GaussianDist, gaussian_entropy, gaussian_kl, gaussian_log_prob
from .nets import DTPolicy, segment_forward
from .pretrain import evaluate
from .seeding import child_seed, rng
from .trajectory import (
    ContextTrail,
    SubTrajBuffer,
    SubTrajRecord,
    TrajBuffer,
    Trajectory,
    compute_rtg,
    rollout_rtg_update,
    sample_subtrajectories,
    sample_trajectories,
)

# exp() guard for importance ratios; far outside the clip region either way
LOG_RATIO_BOUND = 60.0


@dataclass
class GrpoConfig:
    g_online: float
    group_size: int = 8  # G
    reset_points: int = 4  # K
    l_traj: int = 4
    l_eval: int = 16
    gamma: float = 0.99
    eps_clip: float = 0.2
    beta_kl: float = 1e-3
    rho: float | None = None  # target entropy, defaults to -action_dim
    kappa_init: float = 0.1
    kappa_lr: float = 3e-4
    delta_r: float = 0.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    context_len: int = 1  # c_online
    rollouts_per_iter: int = 1
    parents_per_iter: int = 16
    n_batch: int = 256
    n_epochs: int = 8
    traj_capacity: int = 32
    sub_capacity: int = 2048
    ref_update_period: int = 4
    eval_episodes: int = 10
    eval_mode: str = "mean"
    init_replay_with_offline: bool = False
    use_hindsight_relabel: bool = False
    use_sequence_ratio: bool = True
    use_geometric_mean: bool = False
    active_sampling: bool = True
    consistent_states: bool = True

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.reset_points < 1:
            raise ValueError("reset_points must be >= 1")
        if self.l_traj < 1 or self.l_eval < 0:
            raise ValueError("l_traj must be >= 1 and l_eval >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.eps_clip <= 0.0:
            raise ValueError("eps_clip must be positive")
        if self.delta_r < 0.0:
            raise ValueError("delta_r must be >= 0")


def rollout_full(
    env: Env, policy: DTPolicy, g_online: float, seed: int, context_len: int | None = None
) -> Trajectory:
    """One full stochastic episode under rtg conditioning.

    rtgs are stored in rollout form: rtgs[0] = g_online, then decremented
    by each realized reward. Per-step policy variances are recorded for
    active reset-point sampling.
    """
    m = context_len if context_len is not None else policy.cfg.context_len
    d = env.spec.action_dim
    g_act = rng(seed, "rollout-actions")
    state = env.reset(child_seed(seed, "rollout-reset"))
    trail = ContextTrail(m, d)
    g = float(g_online)
    states, actions, rewards, rtgs, vars_ = [], [], [], [], []
    done = False
    terminated = False
    while not done:
        obs = state.observation()
        trail.begin_step(g, obs)
        dist = policy.dist(trail.context())
        a = dist.sample(g_act).numpy()
        res = env.step(a)
        states.append(obs)
        actions.append(a)
        rewards.append(res.reward)
        rtgs.append(g)
        vars_.append(dist.var.numpy())
        trail.push_action(a)
        g = rollout_rtg_update(g, res.reward)
        state = res.state
        done = res.done
        terminated = res.terminated
    return Trajectory(
        states=np.array(states),
        actions=np.array(actions),
        rewards=np.array(rewards),
        rtgs=np.array(rtgs),
        g_init=float(g_online),
        rtg_form="rollout",
        seed=seed,
        final_state=state.observation(),
        terminated=terminated,
        action_vars=np.array(vars_),
    )


def reset_point_probs(traj: Trajectory, active: bool) -> np.ndarray:
    """Distribution over step indices for choosing reset points."""
    T = len(traj)
    if not active:
        return np.full(T, 1.0 / T)
    if traj.action_vars is None:
        raise ValueError("trajectory has no recorded action variances")
    sigma2 = traj.action_vars.mean(axis=1)
    z = sigma2 - sigma2.max()  # softmax with max subtraction
    e = np.exp(z)
    return e / e.sum()


def sample_reset_points(
    traj: Trajectory, K: int, active: bool, g: np.random.Generator
) -> np.ndarray:
    """K step indices without replacement, variance-weighted when active.

    Every stored step has at least one env step remaining (states at the
    horizon are never stored), so all indices are valid; if the
    trajectory has fewer than K steps, all of them are returned.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    p = reset_point_probs(traj, active)
    k = min(K, len(traj))
    return np.sort(g.choice(len(traj), size=k, replace=False, p=p))


def group_advantages(
    rewards: np.ndarray, delta_r: float
) -> tuple[np.ndarray, np.ndarray]:
    """Group-normalized advantages with near-mean filtering.

    Members within delta_r of the group mean are dropped; survivors are
    renormalized by their own mean and population std. Returns
    (advantages, keep mask), both length G; dropped members carry 0.
    Fewer than two survivors drops the whole group (all-False mask). A
    zero-spread group keeps everyone with zero advantages.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) < 2:
        raise ValueError("a group needs at least 2 members")
    keep = np.abs(rewards - rewards.mean()) >= delta_r
    adv = np.zeros_like(rewards)
    if keep.sum() < 2:
        return adv, np.zeros_like(keep)
    survivors = rewards[keep]
    if survivors.max() == survivors.min():
        return adv, keep  # zero spread: advantages are exactly 0
    adv[keep] = (survivors - survivors.mean()) / (survivors.std() + 1e-8)
    return adv, keep


@dataclass
class _Member:
    """Cursor for one group member during lockstep generation."""

    env: Env
    trail: ContextTrail
    g: float
    gen: np.random.Generator
    parent_rtgs: np.ndarray
    parent_states: np.ndarray
    parent_actions: np.ndarray
    reset_state: np.ndarray
    reset_rtg: float
    obs: np.ndarray
    rtgs: list = field(default_factory=list)
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    token_lps: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    alive: bool = True


def _make_member(
    env: Env, traj: Trajectory, k: int, m: int, seed: int
) -> _Member:
    d_pos = env.spec.d_pos
    obs = traj.states[k]
    state = EnvState(obs[:d_pos].copy(), obs[d_pos:].copy(), k)
    member_env = Env(env.spec, teleport=env.teleport)
    member_env.reset_to(state)
    lo = max(0, k - (m - 1))
    parent_rtgs = traj.rtgs[lo:k]
    parent_states = traj.states[lo:k]
    parent_actions = traj.actions[lo:k]
    trail = ContextTrail(
        m, env.spec.action_dim, history=(parent_rtgs, parent_states, parent_actions)
    )
    g_k = float(traj.rtgs[k])
    return _Member(
        env=member_env,
        trail=trail,
        g=g_k,
        gen=np.random.Generator(np.random.PCG64(seed)),
        parent_rtgs=parent_rtgs,
        parent_states=parent_states,
        parent_actions=parent_actions,
        reset_state=obs,
        reset_rtg=g_k,
        obs=obs,
    )


def _advance(policy: DTPolicy, members: list[_Member], stochastic: bool, record: bool) -> int:
    """One lockstep env step for every live member. Returns steps taken."""
    live = [mb for mb in members if mb.alive]
    if not live:
        return 0
    for mb in live:
        mb.trail.begin_step(mb.g, mb.obs)
    contexts = [mb.trail.context() for mb in live]
    mean, var = policy.action_dists(contexts)
    for i, mb in enumerate(live):
        dist = GaussianDist(mean[i], var[i])
        if stochastic:
            a_t = dist.sample(mb.gen)
        else:
            a_t = dist.mode()
        a = a_t.numpy()
        res = mb.env.step(a)
        if record:
            mb.rtgs.append(mb.g)
            mb.states.append(mb.obs)
            mb.actions.append(a)
            mb.token_lps.append(float(dist.log_prob(a_t)))
        mb.rewards.append(res.reward)
        mb.trail.push_action(a)
        mb.g = rollout_rtg_update(mb.g, res.reward)
        mb.obs = res.state.observation()
        if res.done:
            mb.alive = False
    return len(live)


def discounted_return(rewards, gamma: float) -> float:
    """sum_t gamma^t * rewards[t], evaluated by Horner's rule from the tail."""
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
    return float(acc)


def _finish_records(
    groups: list[list[_Member]], cfg: GrpoConfig, snapshot: DTPolicy
) -> list[list[SubTrajRecord]]:
    out = []
    for members in groups:
        records = []
        for mb in members:
            r_sub = discounted_return(mb.rewards[: cfg.l_traj + cfg.l_eval], cfg.gamma)
            rec = SubTrajRecord(
                parent_rtgs=mb.parent_rtgs,
                parent_states=mb.parent_states,
                parent_actions=mb.parent_actions,
                reset_state=mb.reset_state,
                reset_rtg=mb.reset_rtg,
                rtgs=np.array(mb.rtgs),
                states=np.array(mb.states),
                actions=np.array(mb.actions),
                behavior_token_logprobs=np.array(mb.token_lps),
                behavior_seq_logprob=float(np.sum(mb.token_lps)),
                eval_return=r_sub,
            )
            records.append(rec)
        member_rewards = [mb.rewards for mb in members]
        if cfg.use_hindsight_relabel:
            records = _relabel_records(records, member_rewards)
        out.append(records)
    return out


def _relabel_records(
    records: list[SubTrajRecord],
    member_rewards: list[list[float]],
) -> list[SubTrajRecord]:
    """Hindsight-relabel segment rtg tokens from realized returns.

    The conditioning tokens are replaced by the undiscounted suffix sums
    of the member's own realized rewards (rolled to episode end). The
    behavior log-probs stay frozen at their rollout-time values, so after
    relabeling the ratio numerator and denominator describe different
    conditionings. That mismatch is the instability this toggle exists
    to study: the default path avoids it by never touching the tokens.
    """
    for rec, rews in zip(records, member_rewards):
        realized = compute_rtg(np.array(rews))
        L = len(rec)
        rec.rtgs = realized[:L].copy()
        rec.reset_rtg = float(realized[0])
    return records


def _generate_groups(
    env: Env,
    snapshot: DTPolicy,
    jobs: list[tuple[Trajectory, int]],
    cfg: GrpoConfig,
    seed: int,
    iteration: int,
) -> tuple[list[list[SubTrajRecord] | None], int]:
    """Generate all of an iteration's groups in lockstep.

    jobs holds (parent trajectory, reset index) pairs; a job whose reset
    point leaves fewer than l_traj feasible steps yields None. Returns
    (per-job records, env steps consumed).
    """
    snapshot.eval()  # generation is deterministic given seeds; dropout off
    m = cfg.context_len
    groups: list[list[_Member] | None] = []
    for j, (traj, k) in enumerate(jobs):
        if cfg.consistent_states:
            ks = [int(k)] * cfg.group_size
        else:
            # ablation: every member gets its own reset point of the parent
            p = reset_point_probs(traj, cfg.active_sampling)
            feasible = np.flatnonzero(
                env.spec.horizon - np.arange(len(traj)) >= cfg.l_traj
            )
            if len(feasible) == 0:
                groups.append(None)
                continue
            pf = p[feasible] / p[feasible].sum()
            draw = rng(seed, "mixed-resets", iteration, j)
            ks = [int(feasible[i]) for i in draw.choice(len(feasible), size=cfg.group_size, p=pf)]
        if cfg.consistent_states and env.spec.horizon - k < cfg.l_traj:
            groups.append(None)
            continue
        members = [
            _make_member(env, traj, ki, m, child_seed(seed, "member", iteration, j, i))
            for i, ki in enumerate(ks)
        ]
        groups.append(members)
    live_groups = [g for g in groups if g is not None]
    all_members = [mb for g in live_groups for mb in g]
    steps = 0
    for t in range(cfg.l_traj):
        steps += _advance(snapshot, all_members, stochastic=True, record=True)
    for t in range(cfg.l_eval):
        steps += _advance(snapshot, all_members, stochastic=False, record=False)
    if cfg.use_hindsight_relabel:
        # roll to episode end so realized returns are defined
        while any(mb.alive for mb in all_members):
            steps += _advance(snapshot, all_members, stochastic=False, record=False)
    finished = _finish_records(live_groups, cfg, snapshot)
    out: list[list[SubTrajRecord] | None] = []
    it = iter(finished)
    for g in groups:
        out.append(next(it) if g is not None else None)
    return out, steps


def generate_group(
    env: Env,
    snapshot: DTPolicy,
    traj: Trajectory,
    k: int,
    cfg: GrpoConfig,
    seed: int,
    iteration: int = 0,
    group_index: int = 0,
) -> list[SubTrajRecord] | None:
    """G member records from one reset point (None if infeasible)."""
    groups, _ = _generate_groups(
        env, snapshot, [(traj, k)], cfg, seed, iteration
    )
    return groups[0]


def importance_ratio(
    seq_lp_new: torch.Tensor, seq_lp_old: torch.Tensor, length, geometric_mean: bool
) -> torch.Tensor:
    """exp of the (optionally length-normalized) log-prob difference."""
    delta = seq_lp_new - seq_lp_old
    if geometric_mean:
        delta = delta / torch.as_tensor(length, dtype=torch.float64)
    return torch.exp(torch.clamp(delta, -LOG_RATIO_BOUND, LOG_RATIO_BOUND))


def ratio(policy: DTPolicy, rec: SubTrajRecord, cfg: GrpoConfig) -> torch.Tensor:
    """Importance ratio(s) of one record under the current parameters.

    Sequence and geometric-mean modes return a scalar; token mode returns
    one ratio per stored step.
    """
    mean, var, actions, mask = segment_forward(policy, [rec], cfg.context_len)
    token_new = gaussian_log_prob(mean, var, actions)[0, : len(rec)]
    token_old = torch.from_numpy(rec.behavior_token_logprobs)
    if cfg.use_sequence_ratio:
        return importance_ratio(
            token_new.sum(), token_old.sum(), len(rec), cfg.use_geometric_mean
        )
    return importance_ratio(token_new, token_old, 1, False)


def grpo_loss(
    policy: DTPolicy,
    ref_policy: DTPolicy,
    records: list[SubTrajRecord],
    cfg: GrpoConfig,
    dual: EntropyDual,
) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate + beta * KL(pi || pi_ref) - kappa * entropy.

    Advantages are per record; in token mode the record's advantage is
    broadcast to each step with per-token ratios and clipping.
    """
    if not records:
        raise ValueError("empty minibatch")
    m = cfg.context_len
    mean, var, actions, mask = segment_forward(policy, records, m)
    with torch.no_grad():
        ref_mean, ref_var, _, _ = segment_forward(ref_policy, records, m)
    fmask = mask.to(torch.float64)
    lens = fmask.sum(dim=1)
    token_new = gaussian_log_prob(mean, var, actions) * fmask
    token_old = torch.zeros_like(token_new)
    for i, r in enumerate(records):
        token_old[i, : len(r)] = torch.from_numpy(r.behavior_token_logprobs)
    adv = torch.tensor([r.advantage for r in records], dtype=torch.float64)
    lo, hi = 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip

    seq_new = token_new.sum(dim=1)
    seq_old = token_old.sum(dim=1)
    seq_ratio = importance_ratio(seq_new, seq_old, lens, cfg.use_geometric_mean)
    if cfg.use_sequence_ratio:
        surr = -torch.minimum(seq_ratio * adv, torch.clamp(seq_ratio, lo, hi) * adv)
        surrogate = surr.mean()
    else:
        tok_ratio = torch.exp(
            torch.clamp(token_new - token_old, -LOG_RATIO_BOUND, LOG_RATIO_BOUND)
        )
        adv_b = adv[:, None]
        per_tok = -torch.minimum(
            tok_ratio * adv_b, torch.clamp(tok_ratio, lo, hi) * adv_b
        )
        surrogate = ((per_tok * fmask).sum(dim=1) / lens).mean()

    kl_tok = gaussian_kl(mean, var, ref_mean, ref_var) * fmask
    kl_term = (kl_tok.sum(dim=1) / lens).mean()
    ent_tok = gaussian_entropy(var) * fmask
    entropy = ent_tok.sum() / fmask.sum()

    loss = surrogate + cfg.beta_kl * kl_term - dual.kappa * entropy
    log_ratios = (seq_new - seq_old).detach()
    stats = {
        "surrogate": float(surrogate.detach()),
        "kl_to_ref": float(kl_term.detach()),
        "mean_entropy": float(entropy.detach()),
        "mean_ratio": float(seq_ratio.detach().mean()),
        "ratios": seq_ratio.detach().numpy(),
        "log_ratios": log_ratios.numpy(),
        "kappa": dual.kappa,
    }
    return loss, stats


def maybe_update_reference(
    ref_policy: DTPolicy, policy: DTPolicy, update_counter: int, period: int = 4
) -> DTPolicy:
    """Copy current params into the reference on every period-th update."""
    if period > 0 and update_counter % period == 0:
        ref_policy.load_state_dict(copy.deepcopy(policy.state_dict()))
    return ref_policy


def grpo_dt_train(
    env: Env,
    policy: DTPolicy,
    cfg: GrpoConfig,
    iterations: int,
    seed: int,
    offline_dataset: list[Trajectory] | None = None,
    on_iteration=None,
) -> list[dict]:
    """Run the finetuning loop; returns one metrics row per iteration.

    env_steps_cumulative counts environment transitions consumed for
    training (rollouts and group generation); evaluation episodes are
    measurement and excluded.
    """
    policy.eval()
    m = cfg.context_len
    rho = -policy.cfg.action_dim if cfg.rho is None else cfg.rho
    dual = EntropyDual(rho=rho, kappa_init=cfg.kappa_init, lr=cfg.kappa_lr)
    ref = copy.deepcopy(policy)
    opt = torch.optim.AdamW(policy.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    replay = TrajBuffer(cfg.traj_capacity)
    sub = SubTrajBuffer(cfg.sub_capacity)
    if cfg.init_replay_with_offline and offline_dataset:
        for t in offline_dataset[-cfg.traj_capacity :]:
            replay.push(t)
    metrics: list[dict] = []
    env_steps = 0
    grad_updates = 0
    for it in range(iterations):
        snapshot = copy.deepcopy(policy)
        for r in range(cfg.rollouts_per_iter):
            traj = rollout_full(env, snapshot, cfg.g_online, child_seed(seed, "rollout", it, r), m)
            replay.push(traj)
            env_steps += len(traj)
        parents = sample_trajectories(replay, cfg.parents_per_iter, rng(seed, "parents", it))
        jobs = []
        for pi, parent in enumerate(parents):
            active = cfg.active_sampling and parent.action_vars is not None
            ks = sample_reset_points(
                parent, cfg.reset_points, active, rng(seed, "resets", it, pi)
            )
            for k in ks:
                jobs.append((parent, int(k)))
        group_records, steps = _generate_groups(env, snapshot, jobs, cfg, seed, it)
        env_steps += steps
        kept = dropped = 0
        for records in group_records:
            if records is None:
                dropped += 1
                continue
            rewards = np.array([r.eval_return for r in records])
            adv, keep = group_advantages(rewards, cfg.delta_r)
            if not keep.any():
                dropped += 1
                continue
            kept += 1
            for i, rec in enumerate(records):
                if keep[i]:
                    rec.advantage = float(adv[i])
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
                maybe_update_reference(ref, policy, grad_updates, cfg.ref_update_period)
                update_dual(dual, stats["mean_entropy"])
                # ratio diagnostics cover this iteration's own records; replayed
                # records from older snapshots would drown the signal in staleness
                fresh = np.array([r.created_iter == it for r in batch], dtype=bool)
                ratios.append(stats["ratios"][fresh])
                log_ratios.append(stats["log_ratios"][fresh])
                ents.append(stats["mean_entropy"])
                kls.append(stats["kl_to_ref"])
                kappas.append(stats["kappa"])
        eval_mean, eval_std = evaluate(
            policy,
            env,
            cfg.g_online,
            cfg.eval_episodes,
            mode=cfg.eval_mode,
            seed=child_seed(seed, "eval", it),
            context_len=m,
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
        }
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return metrics
