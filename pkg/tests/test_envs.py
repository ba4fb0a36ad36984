import numpy as np
import pytest

from deletion_lab.envs import (
    HILL_GOAL, CmdpSpec, ContextSet, NonFiniteState, builtin_specs, episode_return, estimate_value,
    get_spec, hill_spec, pendulum_angle, pendulum_spec, point_mass_spec, rollout, rollout_batch,
)
from deletion_lab.numerics import make_rng
from deletion_lab.policies import FixedContext, RandomPolicy, ZeroPolicy, analytic_pendulum_controller


class Scripted:
    """Plays a fixed action sequence regardless of state."""

    def __init__(self, seq):
        self.seq = np.asarray(seq, dtype=float)

    def begin(self, contexts):
        n = np.atleast_2d(contexts).shape[0]
        t = iter(range(len(self.seq)))
        return type("C", (), {"act": lambda _s, s, p: np.full((n, 1), self.seq[next(t)])})()


def hanging():
    return np.array([[np.cos(np.pi), np.sin(np.pi), 0.0]])


def test_builtin_specs():
    names = [s.name for s in builtin_specs()]
    assert names == ["pendulum", "hill", "point-mass"]
    pend = pendulum_spec()
    assert (pend.context_low, pend.context_high) == ((5.0, 0.5), (15.0, 2.0))
    hill = hill_spec()
    assert (hill.context_low, hill.context_high) == ((0.0005, 0.001), (0.002, 0.004))
    with pytest.raises(KeyError):
        get_spec("cartpole")


def test_overrides():
    spec = get_spec("pendulum", horizon=10, context_high=[12, 1.5])
    assert spec.horizon == 10 and spec.context_high == (12, 1.5)


def test_pendulum_rest_at_bottom():
    spec = pendulum_spec(horizon=200)
    ep = rollout(spec, [10, 1], FixedContext(ZeroPolicy()), make_rng(0), init_states=hanging())
    th = np.abs(pendulum_angle(ep.trajectory.states))
    assert np.all(np.abs(th - np.pi) < 1e-8)
    assert np.all(np.abs(ep.trajectory.states[:, 2]) < 1e-8)


def test_pendulum_gravity_increases_acceleration():
    spec = pendulum_spec()
    s = np.array([[np.cos(2.0), np.sin(2.0), 0.0]])
    a = np.array([[0.5]])
    acc = [abs(spec.step(s, a, np.array([[g, 1.0]]))[0, 2]) / spec.dt for g in (10.0, 20.0)]
    assert acc[1] > acc[0]


def test_hill_without_force_never_crests():
    spec = hill_spec(horizon=400)
    ctx = np.tile([0.0, 0.0025], (16, 1))
    eps = rollout_batch(spec, ctx, FixedContext(RandomPolicy(spec, make_rng(5))), make_rng(1))
    assert max(ep.trajectory.states[:, 0].max() for ep in eps) < HILL_GOAL


def test_horizon_one():
    spec = pendulum_spec(horizon=1)
    ep = rollout(spec, [10, 1], FixedContext(ZeroPolicy()), make_rng(0))
    assert len(ep.trajectory) == 1
    assert ep.ret == pytest.approx(float(spec.reward(ep.trajectory.states, ep.trajectory.actions)[0]))


def test_rollout_deterministic():
    spec = pendulum_spec(action_noise=0.1)
    a = rollout(spec, [8, 1.2], analytic_pendulum_controller(), make_rng(4))
    b = rollout(spec, [8, 1.2], analytic_pendulum_controller(), make_rng(4))
    assert np.array_equal(a.trajectory.states, b.trajectory.states)
    assert np.array_equal(a.trajectory.actions, b.trajectory.actions)


@pytest.mark.parametrize("spec", builtin_specs(), ids=lambda s: s.name)
def test_returns_recomputable(spec):
    ctx = spec.sample_contexts(make_rng(0), 5)
    for ep in rollout_batch(spec, ctx, FixedContext(RandomPolicy(spec, make_rng(1))), make_rng(2)):
        assert abs(episode_return(spec, ep.trajectory) - ep.ret) <= 1e-10 * max(1, abs(ep.ret))
        assert abs(episode_return(spec, ep.trajectory, discounted=False) - ep.undiscounted_return) <= 1e-10 * max(
            1, abs(ep.undiscounted_return))


def test_actions_clipped():
    spec = point_mass_spec(horizon=5)
    ep = rollout(spec, [1.0], Scripted([5, -5, 0.3, 9, -9]), make_rng(0))
    assert np.allclose(ep.trajectory.actions[:, 0], [1, -1, 0.3, 1, -1])


def test_analytic_controller_beats_zero_policy():
    spec = pendulum_spec()
    ctx = np.tile([10.0, 1.0], (20, 1))
    good = np.mean([ep.undiscounted_return for ep in rollout_batch(spec, ctx, analytic_pendulum_controller(), make_rng(0))])
    zero = np.mean([ep.undiscounted_return for ep in rollout_batch(spec, ctx, FixedContext(ZeroPolicy()), make_rng(0))])
    assert good > zero


def test_estimate_value_single_and_deterministic():
    spec = pendulum_spec(horizon=50)
    mean, std = estimate_value(spec, [10, 1], FixedContext(ZeroPolicy()), 1, make_rng(0))
    assert std == 0.0
    fixed = pendulum_spec(horizon=50, init_spread=0.0)
    _, std = estimate_value(fixed, [10, 1], analytic_pendulum_controller(), 7, make_rng(0))
    assert std == 0.0
    with pytest.raises(ValueError):
        estimate_value(spec, [10, 1], FixedContext(ZeroPolicy()), 0, make_rng(0))


def test_analytic_controller_beats_zero_in_value():
    spec = pendulum_spec()
    good, _ = estimate_value(spec, [10, 1], analytic_pendulum_controller(), 50, make_rng(1))
    zero, _ = estimate_value(spec, [10, 1], FixedContext(ZeroPolicy()), 50, make_rng(1))
    assert good > zero


def test_context_continuity():
    spec = pendulum_spec()
    rng = make_rng(3)
    s = spec.initial_states(rng, 10) + 0.3 * rng.standard_normal((10, 3))
    a = rng.uniform(-2, 2, (10, 1))
    c = spec.sample_contexts(rng, 10)
    base = spec.step(s, a, c)
    moved = spec.step(s, a, c + 1e-6)
    assert np.abs(moved - base).max() <= 1e-5


@pytest.mark.parametrize("spec", builtin_specs(), ids=lambda s: s.name)
def test_contexts_identifiable(spec):
    lo, hi = np.asarray(spec.context_low), np.asarray(spec.context_high)
    grid = lo + (hi - lo) * np.array(np.meshgrid(*[np.linspace(0.1, 0.9, 4)] * spec.c_dim)).reshape(spec.c_dim, -1).T
    seq = np.sin(0.7 * np.arange(60)) * spec.action_high
    spec = spec.with_overrides(horizon=60, init_spread=0.0)
    trajs = [rollout(spec, c, Scripted(seq), make_rng(0)).trajectory.states for c in grid]
    for i in range(len(grid)):
        for j in range(i):
            if np.max(np.abs(grid[i] - grid[j]) / (hi - lo)) > 0.05:
                assert not np.allclose(trajs[i], trajs[j], rtol=0, atol=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_truncates():
    blow = CmdpSpec("blow", 1, 1, ("k",), (1.0,), (2.0,),
                    dynamics=lambda s, a, c, dt: s * 1e200,
                    reward=lambda s, a: np.zeros(len(s)),
                    initial=lambda rng, n, spread: np.ones((n, 1)), horizon=10)
    with pytest.raises(NonFiniteState) as info:
        rollout(blow, [1.5], FixedContext(ZeroPolicy()), make_rng(0))
    assert info.value.step == 2
    ep = info.value.episodes[0]
    assert ep.truncated and len(ep.trajectory) == 2


def test_context_set():
    spec = pendulum_spec()
    cs = ContextSet.sample(spec, 12, make_rng(0), role="eval")
    assert len(cs) == 12 and spec.contains(cs.contexts)
    with pytest.raises(ValueError):
        ContextSet(cs.contexts, role="test")
    assert not spec.contains([[20.0, 1.0]])
