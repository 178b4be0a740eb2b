"""Toy point-mass control environments.

Both environments share the same double-integrator dynamics on a clamped
box. State is (position, velocity), each in [-1, 1]^d, actions in
[-1, 1]^d (clipped internally). One step, in this order:

    position' = clamp(position + velocity * dt, -1, 1)
    velocity' = clamp(velocity + action * dt, -1, 1)

"dense":  d = 1, horizon 100. Reward is forward progress along axis 0,
          (position'[0] - position[0]) / dt, minus 0.001 * ||action||^2.
"sparse": d = 2, horizon 60. Reward 1 exactly when the new position is
          within goal_radius of the goal, and the episode terminates
          there; 0 otherwise. Episode totals are therefore 0 or 1.

Episodes also end when step_index reaches the horizon. Resets draw the
position uniformly from [-0.1, 0.1]^d with zero velocity. `reset_to`
teleports the environment into an arbitrary valid mid-episode state,
which the group-based finetuners rely on; it can be disabled to model
simulators without that capability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng
from .trajectory import Trajectory, compute_rtg

K_P = 1.0
K_D = 0.5
ACTION_COST = 0.001
START_SCALE = 0.1


@dataclass
class EnvSpec:
    name: str
    d_pos: int
    horizon: int
    dt: float
    reward_kind: str  # "dense" | "sparse"
    goal: np.ndarray | None = None
    goal_radius: float = 0.0
    ref_random_return: float | None = None
    ref_expert_return: float | None = None

    @property
    def obs_dim(self) -> int:
        return 2 * self.d_pos

    @property
    def action_dim(self) -> int:
        return self.d_pos


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    step_index: int

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    def copy(self) -> "EnvState":
        return EnvState(self.position.copy(), self.velocity.copy(), self.step_index)


@dataclass
class StepResult:
    state: EnvState
    reward: float
    done: bool
    terminated: bool  # True only for the sparse goal-reached ending


def transition_arrays(
    spec: EnvSpec, position: np.ndarray, velocity: np.ndarray, action: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized dynamics over any leading batch axes.

    Returns (position', velocity', reward, at_goal). The scalar `Env.step`
    goes through this same code path, so batched rollouts are bitwise
    identical to stepping environments one at a time.
    """
    action = np.clip(action, -1.0, 1.0)
    new_pos = np.clip(position + velocity * spec.dt, -1.0, 1.0)
    new_vel = np.clip(velocity + action * spec.dt, -1.0, 1.0)
    if spec.reward_kind == "dense":
        reward = (new_pos[..., 0] - position[..., 0]) / spec.dt
        reward = reward - ACTION_COST * np.sum(action * action, axis=-1)
        at_goal = np.zeros(reward.shape, dtype=bool)
    else:
        dist = np.sqrt(np.sum((new_pos - spec.goal) ** 2, axis=-1))
        at_goal = dist <= spec.goal_radius
        reward = at_goal.astype(np.float64)
    return new_pos, new_vel, reward, at_goal


class Env:
    """Stateful wrapper holding an EnvSpec and the current EnvState."""

    def __init__(self, spec: EnvSpec, teleport: bool = True):
        self.spec = spec
        self.teleport = teleport
        self.state: EnvState | None = None

    def reset(self, seed: int) -> EnvState:
        g = rng(seed, "env-reset")
        pos = g.uniform(-START_SCALE, START_SCALE, size=self.spec.d_pos)
        self.state = EnvState(pos, np.zeros(self.spec.d_pos), 0)
        return self.state.copy()

    def reset_to(self, state: EnvState) -> EnvState:
        """Teleport into a mid-episode state. Validates invariants."""
        if not self.teleport:
            raise RuntimeError(
                f"environment {self.spec.name!r} does not support state-teleport resets"
            )
        d = self.spec.d_pos
        if state.position.shape != (d,) or state.velocity.shape != (d,):
            raise ValueError(
                f"state shape mismatch: expected ({d},) position/velocity, "
                f"got {state.position.shape} and {state.velocity.shape}"
            )
        if np.any(np.abs(state.position) > 1.0) or np.any(np.abs(state.velocity) > 1.0):
            raise ValueError("state outside [-1, 1] bounds")
        if not 0 <= state.step_index < self.spec.horizon:
            raise ValueError(
                f"step_index {state.step_index} outside [0, {self.spec.horizon})"
            )
        self.state = state.copy()
        return self.state.copy()

    def step(self, action: np.ndarray) -> StepResult:
        if self.state is None:
            raise RuntimeError("step before reset")
        s = self.state
        if s.step_index >= self.spec.horizon:
            raise RuntimeError("step on a finished episode")
        action = np.asarray(action, dtype=np.float64)
        new_pos, new_vel, reward, at_goal = transition_arrays(
            self.spec, s.position, s.velocity, action
        )
        terminated = bool(at_goal)
        nxt = EnvState(new_pos, new_vel, s.step_index + 1)
        done = terminated or nxt.step_index >= self.spec.horizon
        self.state = nxt
        return StepResult(nxt.copy(), float(reward), done, terminated)


def make_env(name: str, teleport: bool = True) -> Env:
    if name == "dense":
        spec = EnvSpec(name="dense", d_pos=1, horizon=100, dt=0.1, reward_kind="dense")
    elif name == "sparse":
        spec = EnvSpec(
            name="sparse",
            d_pos=2,
            horizon=60,
            dt=0.1,
            reward_kind="sparse",
            goal=np.array([0.5, 0.5]),
            goal_radius=0.1,
        )
    else:
        raise ValueError(f"unknown environment {name!r} (expected 'dense' or 'sparse')")
    return Env(spec, teleport=teleport)


def scripted_policy(spec: EnvSpec, kind: str):
    """Return a callable (state, rng) -> action for a fixed behavior.

    "random" draws uniformly from the action box. "expert" is a clamped
    PD controller toward the goal direction (dense: +1 along axis 0;
    sparse: the goal point). "medium" is the expert plus N(0, 0.5^2)
    noise, clamped.
    """
    if spec.reward_kind == "dense":
        target = np.zeros(spec.d_pos)
        target[0] = 1.0
    else:
        target = np.asarray(spec.goal, dtype=np.float64)

    def expert(state: EnvState, g: np.random.Generator) -> np.ndarray:
        a = K_P * (target - state.position) - K_D * state.velocity
        return np.clip(a, -1.0, 1.0)

    if kind == "expert":
        return expert
    if kind == "medium":

        def medium(state: EnvState, g: np.random.Generator) -> np.ndarray:
            a = expert(state, g) + g.normal(0.0, 0.5, size=spec.d_pos)
            return np.clip(a, -1.0, 1.0)

        return medium
    if kind == "random":

        def random(state: EnvState, g: np.random.Generator) -> np.ndarray:
            return g.uniform(-1.0, 1.0, size=spec.d_pos)

        return random
    raise ValueError(f"unknown scripted policy {kind!r}")


def run_scripted_episode(env: Env, kind: str, seed: int) -> Trajectory:
    """Roll one full episode under a scripted policy, RTGs in relabeled form."""
    policy = scripted_policy(env.spec, kind)
    g = rng(seed, "scripted", kind)
    state = env.reset(seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        a = policy(state, g)
        res = env.step(a)
        states.append(state.observation())
        actions.append(a)
        rewards.append(res.reward)
        state = res.state
        done = res.done
        terminated = res.terminated
    rewards_arr = np.array(rewards)
    rtgs = compute_rtg(rewards_arr)
    return Trajectory(
        states=np.array(states),
        actions=np.array(actions),
        rewards=rewards_arr,
        rtgs=rtgs,
        g_init=float(rtgs[0]),
        rtg_form="relabeled",
        seed=seed,
        final_state=state.observation(),
        terminated=terminated,
    )


def generate_offline_dataset(
    env: Env, kind: str, n_transitions: int, seed: int
) -> list[Trajectory]:
    """Scripted episodes until at least n_transitions steps are collected."""
    trajs: list[Trajectory] = []
    total = 0
    i = 0
    while total < n_transitions:
        ep_seed = int(rng(seed, "dataset", i).integers(0, 2**62))
        traj = run_scripted_episode(env, kind, ep_seed)
        trajs.append(traj)
        total += len(traj)
        i += 1
    return trajs


def calibrate_refs(env: Env, n_episodes: int = 200, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo reference returns for score normalization.

    Stores (ref_random_return, ref_expert_return) on env.spec and returns
    them. Normalized score = 100 * (R - ref_random) / (ref_expert - ref_random).
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    means = {}
    for kind in ("random", "expert"):
        total = 0.0
        for i in range(n_episodes):
            ep_seed = int(rng(seed, "calibrate", kind, i).integers(0, 2**62))
            traj = run_scripted_episode(env, kind, ep_seed)
            total += float(np.sum(traj.rewards))
        means[kind] = total / n_episodes
    env.spec.ref_random_return = means["random"]
    env.spec.ref_expert_return = means["expert"]
    return means["random"], means["expert"]


def normalized_score(spec: EnvSpec, episode_return: float) -> float:
    if spec.ref_random_return is None or spec.ref_expert_return is None:
        raise ValueError("environment is not calibrated; run calibrate_refs first")
    gap = spec.ref_expert_return - spec.ref_random_return
    return 100.0 * (episode_return - spec.ref_random_return) / gap
