"""Contextual MDP families and batched episode rollout.

A :class:`CmdpSpec` bundles vectorised dynamics ``(s, a, c) -> s'`` and a
context-free reward ``(s, a) -> r``. Rollouts advance a whole batch of
episodes in lock step, one row per episode, each row with its own context.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .buffer import Trajectory


class NonFiniteState(FloatingPointError):
    """Raised when dynamics produce non-finite states.

    ``episodes`` holds the truncated episodes (up to the last finite step).
    """

    def __init__(self, msg, episodes=None, step=None):
        super().__init__(msg)
        self.episodes = episodes or []
        self.step = step


@dataclass(frozen=True)
class CmdpSpec:
    name: str
    s_dim: int
    a_dim: int
    context_names: tuple
    context_low: tuple
    context_high: tuple
    dynamics: Callable = dataclasses.field(repr=False)
    reward: Callable = dataclasses.field(repr=False)
    initial: Callable = dataclasses.field(repr=False)
    action_low: float = -1.0
    action_high: float = 1.0
    horizon: int = 200
    gamma: float = 0.99
    dt: float = 0.05
    action_noise: float = 0.0
    init_spread: float = 0.05

    @property
    def c_dim(self) -> int:
        return len(self.context_names)

    def with_overrides(self, **kw) -> "CmdpSpec":
        for key in ("context_low", "context_high", "context_names"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return dataclasses.replace(self, **kw)

    def step(self, s, a, c):
        return self.dynamics(s, a, c, self.dt)

    def sample_contexts(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = np.asarray(self.context_low), np.asarray(self.context_high)
        return lo + (hi - lo) * rng.random((n, self.c_dim))

    def contains(self, c) -> bool:
        c = np.atleast_2d(c)
        return bool(np.all((c >= np.asarray(self.context_low) - 1e-12)
                           & (c <= np.asarray(self.context_high) + 1e-12)))

    def initial_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.initial(rng, n, self.init_spread)


@dataclass(frozen=True)
class ContextSet:
    contexts: np.ndarray
    role: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "contexts", np.atleast_2d(np.asarray(self.contexts, dtype=float)))
        if self.role not in ("train", "eval"):
            raise ValueError(f"role must be 'train' or 'eval', got {self.role!r}")

    def __len__(self):
        return self.contexts.shape[0]

    def __iter__(self):
        return iter(self.contexts)

    @classmethod
    def sample(cls, spec: CmdpSpec, n: int, rng, role="train") -> "ContextSet":
        return cls(spec.sample_contexts(rng, n), role)


@dataclass(frozen=True, eq=False)
class Episode:
    trajectory: Trajectory
    ret: float
    undiscounted_return: float
    truncated: bool = False


# -- pendulum ----------------------------------------------------------------
# state (cos th, sin th, th_dot); th = 0 is upright. Rod of unit mass,
# th_ddot = 3 g / (2 l) sin th + 3 u / l^2.

PENDULUM_MAX_TORQUE = 2.0


def pendulum_coefficients(c):
    c = np.atleast_2d(c)
    g, l = c[:, 0], c[:, 1]
    return 1.5 * g / l, 3.0 / l ** 2


def pendulum_angle(s):
    return np.arctan2(s[..., 1], s[..., 0])


def _pendulum_dynamics(s, a, c, dt):
    grav, gain = pendulum_coefficients(c)
    th = pendulum_angle(s)
    th_dot = s[:, 2] + dt * (grav * np.sin(th) + gain * a[:, 0])
    th = th + dt * th_dot
    return np.stack([np.cos(th), np.sin(th), th_dot], axis=1)


def _pendulum_reward(s, a):
    th = pendulum_angle(s)
    return -(th ** 2 + 0.1 * s[:, 2] ** 2 + 0.001 * a[:, 0] ** 2)


def _pendulum_initial(rng, n, spread):
    th = np.pi + spread * rng.uniform(-1, 1, n)
    th_dot = spread * rng.uniform(-1, 1, n)
    return np.stack([np.cos(th), np.sin(th), th_dot], axis=1)


# -- hill climb (mountain-car style) ------------------------------------------
HILL_GOAL = 0.45


def _hill_dynamics(s, a, c, dt):
    pos, vel = s[:, 0], s[:, 1]
    force, gravity = c[:, 0], c[:, 1]
    done = pos >= HILL_GOAL
    vel_new = np.clip(vel + force * a[:, 0] - gravity * np.cos(3 * pos), -0.07, 0.07)
    pos_new = np.clip(pos + vel_new, -1.2, 0.6)
    vel_new = np.where((pos_new <= -1.2) & (vel_new < 0), 0.0, vel_new)
    # the goal is absorbing
    pos_new = np.where(done, pos, pos_new)
    vel_new = np.where(done, 0.0, vel_new)
    return np.stack([pos_new, vel_new], axis=1)


def _hill_reward(s, a):
    return -(s[:, 0] < HILL_GOAL).astype(float) - 0.1 * a[:, 0] ** 2


def _hill_initial(rng, n, spread):
    pos = -0.5 + 2 * spread * rng.uniform(-1, 1, n)
    return np.stack([pos, np.zeros(n)], axis=1)


# -- point mass with drag ------------------------------------------------------

def _point_dynamics(s, a, c, dt):
    x, v = s[:, 0], s[:, 1]
    v = v + dt * (a[:, 0] - c[:, 0] * v)
    return np.stack([x + dt * v, v], axis=1)


def _point_reward(s, a):
    return -(s[:, 0] ** 2 + 0.1 * s[:, 1] ** 2 + 0.001 * a[:, 0] ** 2)


def _point_initial(rng, n, spread):
    return np.stack([1.0 + spread * rng.uniform(-1, 1, n), np.zeros(n)], axis=1)


def pendulum_spec(**kw) -> CmdpSpec:
    spec = CmdpSpec(
        name="pendulum", s_dim=3, a_dim=1,
        context_names=("g", "l"), context_low=(5.0, 0.5), context_high=(15.0, 2.0),
        dynamics=_pendulum_dynamics, reward=_pendulum_reward, initial=_pendulum_initial,
        action_low=-PENDULUM_MAX_TORQUE, action_high=PENDULUM_MAX_TORQUE,
    )
    return spec.with_overrides(**kw) if kw else spec


def hill_spec(**kw) -> CmdpSpec:
    spec = CmdpSpec(
        name="hill", s_dim=2, a_dim=1,
        context_names=("force", "gravity"), context_low=(0.0005, 0.001), context_high=(0.002, 0.004),
        dynamics=_hill_dynamics, reward=_hill_reward, initial=_hill_initial,
        dt=1.0,
    )
    return spec.with_overrides(**kw) if kw else spec


def point_mass_spec(**kw) -> CmdpSpec:
    spec = CmdpSpec(
        name="point-mass", s_dim=2, a_dim=1,
        context_names=("drag",), context_low=(0.1,), context_high=(2.0,),
        dynamics=_point_dynamics, reward=_point_reward, initial=_point_initial,
    )
    return spec.with_overrides(**kw) if kw else spec


def builtin_specs() -> list[CmdpSpec]:
    return [pendulum_spec(), hill_spec(), point_mass_spec()]


def get_spec(name: str, **overrides) -> CmdpSpec:
    for spec in builtin_specs():
        if spec.name == name:
            return spec.with_overrides(**overrides) if overrides else spec
    raise KeyError(f"unknown environment {name!r}; known: {[s.name for s in builtin_specs()]}")


# -- rollout ---------------------------------------------------------------------

def discounted_return(rewards, gamma):
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def episode_return(spec: CmdpSpec, traj: Trajectory, discounted=True) -> float:
    r = spec.reward(traj.states, traj.actions)
    return discounted_return(r, spec.gamma) if discounted else float(r.sum())


def rollout_batch(spec: CmdpSpec, contexts, policy, rng: np.random.Generator,
                  round_tag: int = 1, init_states=None, horizon=None) -> list[Episode]:
    """Roll out one episode per context row in lock step.

    ``policy.begin(contexts)`` must return a controller whose
    ``act(states, prev_actions)`` gives raw actions for the batch.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    n = contexts.shape[0]
    T = spec.horizon if horizon is None else horizon
    s = spec.initial_states(rng, n) if init_states is None else np.array(init_states, dtype=float)
    states = np.empty((T, n, spec.s_dim))
    actions = np.empty((T, n, spec.a_dim))
    rewards = np.empty((T, n))
    ctrl = policy.begin(contexts)
    prev = np.zeros((n, spec.a_dim))
    last = T
    for t in range(T):
        a = np.asarray(ctrl.act(s, prev), dtype=float).reshape(n, spec.a_dim)
        if spec.action_noise > 0:
            a = a + spec.action_noise * rng.standard_normal(a.shape)
        a = np.clip(a, spec.action_low, spec.action_high)
        states[t], actions[t] = s, a
        rewards[t] = spec.reward(s, a)
        prev = a
        if t + 1 < T:
            s = spec.step(s, a, contexts)
            if not np.all(np.isfinite(s)):
                last = t + 1
                break
    disc = spec.gamma ** np.arange(last)
    episodes = [
        Episode(
            trajectory=Trajectory(states[:last, i].copy(), actions[:last, i].copy(), contexts[i], round_tag),
            ret=float(np.sum(rewards[:last, i] * disc)),
            undiscounted_return=float(rewards[:last, i].sum()),
            truncated=last < T,
        )
        for i in range(n)
    ]
    if last < T:
        raise NonFiniteState(f"{spec.name}: non-finite state at step {last}", episodes, last)
    return episodes


def rollout(spec: CmdpSpec, c, policy, rng: np.random.Generator, **kw) -> Episode:
    return rollout_batch(spec, np.atleast_2d(c), policy, rng, **kw)[0]


def estimate_value(spec: CmdpSpec, c, policy, n_episodes: int, rng) -> tuple[float, float]:
    """Mean and (population) std of undiscounted returns over ``n_episodes``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    ctx = np.repeat(np.atleast_2d(c), n_episodes, axis=0)
    rets = np.array([ep.undiscounted_return for ep in rollout_batch(spec, ctx, policy, rng)])
    # spread about the first sample: exactly zero for identical returns
    return float(rets.mean()), float((rets - rets[0]).std())


def estimate_values(spec: CmdpSpec, contexts, policy, n_episodes: int, rng):
    """Per-context (mean, std) for many contexts in one batched rollout."""
    contexts = np.atleast_2d(contexts)
    ctx = np.repeat(contexts, n_episodes, axis=0)
    rets = np.array([ep.undiscounted_return for ep in rollout_batch(spec, ctx, policy, rng)])
    rets = rets.reshape(contexts.shape[0], n_episodes)
    return rets.mean(axis=1), (rets - rets[:, :1]).std(axis=1)
