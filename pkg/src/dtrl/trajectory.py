"""Trajectories, return-to-go bookkeeping, context windows, and replay buffers.

A trajectory carries exactly one of two RTG forms, recorded in `rtg_form`:

"relabeled": rtgs[h] is the realized suffix sum of rewards, accumulated
    from the tail (rtgs[h] = rewards[h] + rtgs[h+1], computed back to
    front). Offline datasets use this form.
"rollout":   rtgs[h] is the conditioning value the policy actually saw
    while acting online: rtgs[0] = g_init and rtgs[h+1] = rtgs[h] -
    rewards[h]. Online rollouts keep this form so that stored contexts
    match the distribution the behavior policy was conditioned on.

Sub-trajectory records are the unit the group-based finetuner trains on:
a short action-sampled segment plus the frozen behavior log-probs and a
group-relative advantage.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    states: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    rtgs: np.ndarray  # (T,)
    g_init: float
    rtg_form: str  # "relabeled" | "rollout"
    seed: int = 0
    final_state: np.ndarray | None = None  # observation after the last step
    terminated: bool = False  # sparse goal reached (vs horizon truncation)
    action_vars: np.ndarray | None = None  # (T, action_dim) policy variances, online only

    def __post_init__(self):
        T = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.rtgs) == T):
            raise ValueError("trajectory field lengths disagree")
        if self.rtg_form not in ("relabeled", "rollout"):
            raise ValueError(f"unknown rtg_form {self.rtg_form!r}")

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class SubTrajRecord:
    """One group member: parent context, reset point, sampled segment.

    parent_* hold the up-to-(m-1) token triples preceding the reset point,
    in rollout RTG form. The segment arrays cover the stochastic steps
    actually taken (normally L_traj; fewer only when the episode
    terminated inside the window). `eval_return` is the discounted raw
    reward of the stochastic-plus-mean-action continuation that the group
    advantage was computed from.
    """

    parent_rtgs: np.ndarray  # (p,)
    parent_states: np.ndarray  # (p, obs_dim)
    parent_actions: np.ndarray  # (p, action_dim)
    reset_state: np.ndarray  # (obs_dim,)
    reset_rtg: float
    rtgs: np.ndarray  # (L,)
    states: np.ndarray  # (L, obs_dim)
    actions: np.ndarray  # (L, action_dim)
    behavior_token_logprobs: np.ndarray  # (L,)
    behavior_seq_logprob: float
    eval_return: float
    advantage: float = 0.0
    created_iter: int = 0  # training iteration whose snapshot generated this record

    def __len__(self) -> int:
        return len(self.rtgs)


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums of rewards, accumulated strictly from the tail.

    rtgs[T-1] = rewards[T-1] and rtgs[h] = rewards[h] + rtgs[h+1], so the
    recursion holds bitwise by construction.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    T = len(rewards)
    out = np.empty(T)
    acc = 0.0
    for h in range(T - 1, -1, -1):
        acc = rewards[h] + acc
        out[h] = acc
    return out


def rollout_rtg_update(g: float, reward: float) -> float:
    """Conditioning value for the next step while acting online."""
    return g - reward


def relabel_hindsight(traj: Trajectory) -> Trajectory:
    """Replace RTGs with realized suffix sums. Idempotent."""
    rtgs = compute_rtg(traj.rewards)
    return Trajectory(
        states=traj.states,
        actions=traj.actions,
        rewards=traj.rewards,
        rtgs=rtgs,
        g_init=float(rtgs[0]) if len(rtgs) else 0.0,
        rtg_form="relabeled",
        seed=traj.seed,
        final_state=traj.final_state,
        terminated=traj.terminated,
        action_vars=traj.action_vars,
    )


@dataclass
class Context:
    """Model input: k+1 (rtg, state) pairs and the k actions between them.

    The action of the final step is absent; the model predicts it from
    the features at the last state token.
    """

    rtgs: np.ndarray  # (k+1,)
    states: np.ndarray  # (k+1, obs_dim)
    actions: np.ndarray  # (k, action_dim)

    @property
    def steps(self) -> int:
        return len(self.rtgs)


def window(traj: Trajectory, h: int, m: int) -> Context:
    """Context for predicting the action at step h with at most m steps.

    Near the start of the trajectory the window is simply shorter; there
    is no padding.
    """
    if not 0 <= h < len(traj):
        raise IndexError(f"step {h} outside trajectory of length {len(traj)}")
    if m < 1:
        raise ValueError("context length must be >= 1")
    lo = max(0, h - m + 1)
    return Context(
        rtgs=traj.rtgs[lo : h + 1],
        states=traj.states[lo : h + 1],
        actions=traj.actions[lo:h],
    )


class ContextTrail:
    """Rolling context for acting online: last m-1 completed token triples
    plus the pending (rtg, state) of the current step.

    Optionally seeded with history (e.g. the tokens preceding a teleport
    reset point), truncated to the most recent m-1 triples.
    """

    def __init__(
        self,
        m: int,
        action_dim: int,
        history: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    ):
        if m < 1:
            raise ValueError("context length must be >= 1")
        self.m = m
        self.action_dim = action_dim
        self._rtgs: deque = deque(maxlen=m - 1)
        self._states: deque = deque(maxlen=m - 1)
        self._actions: deque = deque(maxlen=m - 1)
        if history is not None:
            h_rtgs, h_states, h_actions = history
            for i in range(len(h_rtgs)):
                self._rtgs.append(float(h_rtgs[i]))
                self._states.append(np.asarray(h_states[i], dtype=np.float64))
                self._actions.append(np.asarray(h_actions[i], dtype=np.float64))
        self._pending: tuple[float, np.ndarray] | None = None

    def begin_step(self, g: float, state: np.ndarray) -> None:
        self._pending = (float(g), np.asarray(state, dtype=np.float64))

    def context(self) -> Context:
        if self._pending is None:
            raise RuntimeError("no pending step; call begin_step first")
        g, s = self._pending
        rtgs = np.array(list(self._rtgs) + [g])
        states = np.stack(list(self._states) + [s])
        if self._actions:
            actions = np.stack(list(self._actions))
        else:
            actions = np.zeros((0, self.action_dim))
        return Context(rtgs, states, actions)

    def push_action(self, action: np.ndarray) -> None:
        if self._pending is None:
            raise RuntimeError("no pending step to complete")
        g, s = self._pending
        self._rtgs.append(g)
        self._states.append(s)
        self._actions.append(np.asarray(action, dtype=np.float64))
        self._pending = None


class TrajBuffer:
    """FIFO buffer of trajectories with a fixed capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, item) -> None:
        self._items.append(item)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int):
        return self._items[i]

    def items(self) -> list:
        return list(self._items)


SubTrajBuffer = TrajBuffer  # same FIFO mechanics, different element type


def sample_trajectories(
    buffer: TrajBuffer, n: int, g: np.random.Generator
) -> list[Trajectory]:
    """Sample n trajectories with replacement, p(tau) proportional to len(tau)."""
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty buffer")
    items = buffer.items()
    lengths = np.array([len(t) for t in items], dtype=np.float64)
    probs = lengths / lengths.sum()
    idx = g.choice(len(items), size=n, replace=True, p=probs)
    return [items[i] for i in idx]


def sample_subtrajectories(
    buffer: TrajBuffer, n: int, g: np.random.Generator
) -> list[SubTrajRecord]:
    """Sample n stored records uniformly with replacement."""
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty buffer")
    items = buffer.items()
    idx = g.integers(0, len(items), size=n)
    return [items[i] for i in idx]
