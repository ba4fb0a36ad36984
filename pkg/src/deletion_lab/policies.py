"""Context-conditioned (universal) policies and their controllers.

A universal policy ``K`` maps a batch of states and a batch of contexts to
actions via ``K.action(states, contexts)``. To roll it out, wrap it:

* ``FixedContext(K, c)`` plays ``K(c)``; with ``c=None`` it plays each
  episode's true context (UP-true).
* ``with_estimator(K, phi)`` plays ``K(phi(history))``, refreshing the
  estimate every step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import CmdpSpec, pendulum_angle, pendulum_coefficients, PENDULUM_MAX_TORQUE

CHECKPOINT_VERSION = 1


class DimensionMismatch(ValueError):
    pass


class SearchDiverged(FloatingPointError):
    pass


# -- universal policies -------------------------------------------------------

@dataclass(frozen=True)
class AnalyticPendulum:
    """Energy-shaping swing-up with a PD catch, gains derived from (g, l).

    With ``a = 3g/(2l)`` and ``b = 3/l^2`` the pendulum obeys
    ``th_ddot = a sin th + b u`` and the energy ``E = th_dot^2/2 + a (cos th - 1)``
    (zero when upright at rest) changes as ``dE/dt = b u th_dot``.
    """
    kind = "analytic"
    energy_gain: float = 2.0
    catch_angle: float = 0.6
    omega: float = 3.0
    zeta: float = 0.9
    max_torque: float = PENDULUM_MAX_TORQUE

    def action(self, states, contexts):
        a, b = pendulum_coefficients(contexts)
        th = pendulum_angle(states)
        th_dot = states[:, 2]
        energy = 0.5 * th_dot ** 2 + a * (np.cos(th) - 1.0)
        direction = np.where(th_dot >= 0, 1.0, -1.0)
        pump = self.max_torque * np.clip(-self.energy_gain * energy / a, -1.0, 1.0) * direction
        kp = (a + self.omega ** 2) / b
        kd = 2.0 * self.zeta * self.omega / b
        catch = -(kp * th + kd * th_dot)
        u = np.where(np.abs(th) < self.catch_angle, catch, pump)
        return np.clip(u, -self.max_torque, self.max_torque)[:, None]


def analytic_pendulum_controller(c=None, **gains):
    """UP-true style controller; with ``c`` given, fixed to that context."""
    if c is not None:
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise ValueError("pendulum context (g, l) must be positive")
    return FixedContext(AnalyticPendulum(**gains), c)


class ZeroPolicy:
    kind = "analytic"

    def __init__(self, a_dim=1):
        self.a_dim = a_dim

    def action(self, states, contexts):
        return np.zeros((states.shape[0], self.a_dim))


class RandomPolicy:
    """Uniform random actions from its own stream (for baselines only)."""
    kind = "analytic"

    def __init__(self, spec: CmdpSpec, rng):
        self.spec, self.rng = spec, rng

    def action(self, states, contexts):
        return self.rng.uniform(self.spec.action_low, self.spec.action_high,
                                (states.shape[0], self.spec.a_dim))


def _mlp_layout(in_dim, hidden, out_dim):
    return [(in_dim, hidden), (hidden,), (hidden, out_dim), (out_dim,)]


@dataclass
class MLPPolicy:
    """One hidden tanh layer on the augmented state ``z = [s, c]``.

    Contexts are mapped to [-1, 1] with the environment's context box before
    entering the network; the output is squashed by tanh into the action box.
    """
    spec: CmdpSpec
    params: np.ndarray
    hidden: int = 32
    kind = "parametric"

    @staticmethod
    def n_params(spec: CmdpSpec, hidden=32):
        return sum(int(np.prod(s)) for s in _mlp_layout(spec.s_dim + spec.c_dim, hidden, spec.a_dim))

    @classmethod
    def init(cls, spec, rng, hidden=32, std=0.5):
        return cls(spec, std * rng.standard_normal(cls.n_params(spec, hidden)), hidden)

    def _scale_context(self, c):
        lo, hi = np.asarray(self.spec.context_low), np.asarray(self.spec.context_high)
        return 2.0 * (c - lo) / np.where(hi > lo, hi - lo, 1.0) - 1.0

    def action(self, states, contexts):
        return batched_mlp_action(self.spec, self.params[None], states, contexts, self.hidden, self._scale_context)

    def to_dict(self):
        return {"version": CHECKPOINT_VERSION, "kind": "mlp-policy", "env": self.spec.name,
                "hidden": self.hidden, "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d, spec):
        if d.get("version") != CHECKPOINT_VERSION or d.get("kind") != "mlp-policy":
            raise ValueError("unsupported policy checkpoint")
        return cls(spec, np.asarray(d["params"], dtype=float), d["hidden"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, spec):
        return cls.from_dict(json.loads(Path(path).read_text()), spec)


def batched_mlp_action(spec, params, states, contexts, hidden, scale_context):
    """Evaluate ``P`` parameter vectors at once; rows are split evenly among them."""
    P = params.shape[0]
    n = states.shape[0]
    z = np.concatenate([states, scale_context(np.atleast_2d(contexts))], axis=1).reshape(P, n // P, -1)
    in_dim = z.shape[2]
    i = 0
    W1 = params[:, i:i + in_dim * hidden].reshape(P, in_dim, hidden); i += in_dim * hidden
    b1 = params[:, i:i + hidden]; i += hidden
    W2 = params[:, i:i + hidden * spec.a_dim].reshape(P, hidden, spec.a_dim); i += hidden * spec.a_dim
    b2 = params[:, i:i + spec.a_dim]
    h = np.tanh(np.einsum("pni,pih->pnh", z, W1) + b1[:, None, :])
    out = np.tanh(np.einsum("pnh,pha->pna", h, W2) + b2[:, None, :])
    mid = 0.5 * (spec.action_high + spec.action_low)
    half = 0.5 * (spec.action_high - spec.action_low)
    return (mid + half * out).reshape(n, spec.a_dim)


# -- rollout wrappers -----------------------------------------------------------

class _FixedController:
    def __init__(self, K, contexts):
        self.K, self.contexts = K, contexts

    def act(self, states, prev_actions):
        return self.K.action(states, self.contexts)


@dataclass
class FixedContext:
    """``K`` evaluated at a fixed context; ``context=None`` means the true one."""
    K: object
    context: np.ndarray | None = None

    @property
    def kind(self):
        return getattr(self.K, "kind", "analytic")

    def begin(self, true_contexts):
        true_contexts = np.atleast_2d(true_contexts)
        if self.context is None:
            ctx = true_contexts
        else:
            ctx = np.broadcast_to(np.asarray(self.context, dtype=float), true_contexts.shape)
        return _FixedController(self.K, ctx)


class _AdaptiveController:
    def __init__(self, K, tracker, refresh):
        self.K, self.tracker, self.refresh = K, tracker, refresh
        self.estimates = []
        self._t = 0
        self._c_hat = None

    def act(self, states, prev_actions):
        # the tracker sees every step; the policy's estimate changes every `refresh` steps
        c_hat = self.tracker.update(states, prev_actions)
        if self._t % self.refresh == 0:
            self._c_hat = c_hat
        self._t += 1
        self.estimates.append(self._c_hat)
        return self.K.action(states, self._c_hat)


@dataclass
class AdaptivePolicy:
    K: object
    estimator: object
    refresh: int = 1

    kind = "adaptive"

    def begin(self, true_contexts):
        n = np.atleast_2d(true_contexts).shape[0]
        return _AdaptiveController(self.K, self.estimator.tracker(n), self.refresh)


def with_estimator(K, estimator, c_dim=None, refresh=1) -> AdaptivePolicy:
    """Adaptive policy ``K(phi)``; the estimate is refreshed every ``refresh`` steps."""
    if isinstance(K, FixedContext):
        K = K.K
    if c_dim is not None and estimator.c_dim != c_dim:
        raise DimensionMismatch(f"estimator outputs {estimator.c_dim} dims, policy expects {c_dim}")
    if refresh < 1:
        raise ValueError("refresh must be >= 1")
    return AdaptivePolicy(K, estimator, int(refresh))


# -- cross-entropy method --------------------------------------------------------

@dataclass(frozen=True)
class PolicySearchConfig:
    population: int = 64
    elites: int = 8
    iterations: int = 100
    init_std: float = 0.5
    episodes: int = 4
    seed: int = 0
    hidden: int = 32
    min_std: float = 0.02

    def __post_init__(self):
        if not 1 <= self.elites <= self.population:
            raise ValueError("need 1 <= elites <= population")


@dataclass
class SearchLog:
    elite_means: list = field(default_factory=list)
    best: list = field(default_factory=list)

    @property
    def monotone_fraction(self):
        e = np.asarray(self.elite_means)
        return float(np.mean(np.diff(e) >= 0)) if e.size > 1 else 1.0


def train_universal(spec: CmdpSpec, train_contexts, cfg: PolicySearchConfig, log: SearchLog | None = None) -> MLPPolicy:
    """Cross-entropy search over MLP parameters on mean return.

    Every candidate is scored on ``cfg.episodes`` episodes whose contexts are
    redrawn from ``train_contexts`` each iteration; all candidates share the
    same contexts and start states within an iteration.
    """
    from .numerics import make_rng  # local to keep module import light

    ctx_set = np.atleast_2d(getattr(train_contexts, "contexts", train_contexts))
    if ctx_set.shape[0] == 0:
        raise ValueError("empty training context set")
    rng = make_rng(cfg.seed)
    policy = MLPPolicy.init(spec, rng, cfg.hidden, cfg.init_std)
    mean = policy.params.copy()
    std = np.full_like(mean, cfg.init_std)
    log = log if log is not None else SearchLog()
    for _ in range(cfg.iterations):
        cand = mean + std * rng.standard_normal((cfg.population, mean.size))
        ctx = ctx_set[rng.integers(0, ctx_set.shape[0], cfg.episodes)]
        s0 = spec.initial_states(rng, cfg.episodes)
        scores = _score_candidates(spec, cand, ctx, s0, policy)
        if not np.all(np.isfinite(scores)):
            raise SearchDiverged("non-finite candidate returns")
        elite = np.argsort(scores, kind="stable")[::-1][:cfg.elites]
        log.elite_means.append(float(scores[elite].mean()))
        log.best.append(float(scores[elite[0]]))
        mean = cand[elite].mean(axis=0)
        std = np.maximum(cand[elite].std(axis=0), cfg.min_std)
    return MLPPolicy(spec, mean, cfg.hidden)


def _score_candidates(spec, cand, ctx, s0, template):
    P, E = cand.shape[0], ctx.shape[0]
    ctx_all = np.tile(ctx, (P, 1))
    s = np.tile(s0, (P, 1))
    total = np.zeros(P * E)
    for _ in range(spec.horizon):
        a = batched_mlp_action(spec, cand, s, ctx_all, template.hidden, template._scale_context)
        a = np.clip(a, spec.action_low, spec.action_high)
        total += spec.reward(s, a)
        s = spec.step(s, a, ctx_all)
        if not np.all(np.isfinite(s)):
            return np.full(P, np.nan)
    return total.reshape(P, E).mean(axis=1)
