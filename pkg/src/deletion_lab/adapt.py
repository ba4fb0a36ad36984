"""Multi-round estimator training with buffer deletion, and robustness gaps.

Round 1 collects with ``K(c)`` at the true context, later rounds with the
adaptive policy ``K(phi_{i-1})``. After each round's gradient steps the
buffer applies its deletion strategy (none after the final round).

Randomness is split per purpose and per round from one root seed, so
collection noise in round ``i`` is the same whatever the deletion strategy,
and round 1 is identical across strategies and retention fractions.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import TrajectoryBuffer
from .envs import CmdpSpec, NonFiniteState, estimate_values, rollout_batch
from .estimators import (
    Estimator, NonFiniteLoss, TrainConfig, dataset_loss, fit_normalization, make_estimator, train_round,
)
from .numerics import TOL, make_rng
from .policies import FixedContext, with_estimator

log = logging.getLogger(__name__)


class DegenerateBaseline(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    arch: str = "mlp"
    k: int = 4
    widths: tuple = (128, 32, 32)
    hidden: int = 32

    def build(self, spec: CmdpSpec, rng) -> Estimator:
        return make_estimator(self.arch, spec.s_dim, spec.a_dim, spec.c_dim, rng,
                              k=self.k, widths=tuple(self.widths), hidden=self.hidden)


NARROW_MLP = EstimatorSpec("mlp", widths=(128, 32, 32))
WIDE_MLP = EstimatorSpec("mlp", widths=(256, 128, 64))
GRU = EstimatorSpec("gru", hidden=32)


@dataclass(frozen=True)
class RoundPlan:
    rounds: int = 6
    episodes_per_round: int = 50
    strategy: str = "random"
    alpha: float = 1.0
    estimator: EstimatorSpec = NARROW_MLP
    train: TrainConfig = TrainConfig()
    val_episodes: int = 0
    refresh: int = 1          # steps between context-estimate updates in rollouts

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.refresh < 1:
            raise ValueError("refresh must be >= 1")


@dataclass
class RoundLog:
    round: int
    buffer_size: int
    view_size: int
    losses: list = field(default_factory=list)
    val_loss: float | None = None


@dataclass
class TrainingResult:
    estimator: Estimator
    buffer: TrajectoryBuffer
    logs: list
    initial_estimator: Estimator | None = None


def _streams(seed, rounds):
    root = np.random.SeedSequence(int(seed))
    init, buffer, *rest = root.spawn(2 + 3 * rounds)
    collect = rest[0::3]
    train = rest[1::3]
    val = rest[2::3]
    return make_rng(init), make_rng(buffer), [make_rng(s) for s in collect], \
        [make_rng(s) for s in train], [make_rng(s) for s in val]


def run_training(spec: CmdpSpec, train_contexts, K, plan: RoundPlan, seed: int = 0,
                 after_round=None) -> TrainingResult:
    """Train a context estimator for ``plan.rounds`` rounds of collection and deletion.

    ``K`` is a universal policy (anything with ``action(states, contexts)``,
    or a ``FixedContext`` wrapper around one). ``after_round`` is called as
    ``after_round(round, estimator, buffer)`` once per round.
    """
    K = K.K if isinstance(K, FixedContext) else K
    ctx = np.atleast_2d(getattr(train_contexts, "contexts", train_contexts))
    if ctx.shape[0] == 0:
        raise ValueError("empty training context set")
    init_rng, buf_rng, collect, train, val = _streams(seed, plan.rounds)
    phi = plan.estimator.build(spec, init_rng)
    initial = phi
    buffer = TrajectoryBuffer(plan.strategy, plan.alpha, buf_rng)
    logs = []
    for i in range(1, plan.rounds + 1):
        rng = collect[i - 1]
        try:
            cs = ctx[rng.integers(0, ctx.shape[0], plan.episodes_per_round)]
            policy = FixedContext(K) if i == 1 else with_estimator(K, phi, refresh=plan.refresh)
            episodes = rollout_batch(spec, cs, policy, rng, round_tag=i)
            buffer.extend(ep.trajectory for ep in episodes)
            if i == 1:
                phi = fit_normalization(phi, [ep.trajectory for ep in episodes])
                initial = phi
            view = buffer.training_view()
            entry = RoundLog(i, len(buffer), len(view))
            phi = train_round(phi, view, plan.train, train[i - 1], entry.losses)
            if plan.val_episodes:
                vr = val[i - 1]
                vcs = ctx[vr.integers(0, ctx.shape[0], plan.val_episodes)]
                held = rollout_batch(spec, vcs, with_estimator(K, phi, refresh=plan.refresh), vr, round_tag=i)
                entry.val_loss = dataset_loss(phi, [ep.trajectory for ep in held])
        except (NonFiniteLoss, NonFiniteState) as exc:
            exc.round = i
            raise
        logs.append(entry)
        log.debug("round %d: buffer=%d view=%d loss=%.4g", i, entry.buffer_size, entry.view_size,
                  entry.losses[-1] if entry.losses else float("nan"))
        if after_round is not None:
            after_round(i, phi, buffer)
        if i < plan.rounds:
            buffer.end_of_round()
    return TrainingResult(phi, buffer, logs, initial)


# -- robustness gap -------------------------------------------------------------------

@dataclass
class RobustnessReport:
    contexts: np.ndarray
    j_star: np.ndarray
    j_policy: np.ndarray
    j_policy_std: np.ndarray
    gaps: np.ndarray
    n_episodes: int
    seed: int | None = None

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max())

    @property
    def mean_gap(self) -> float:
        return float(self.gaps.mean())

    def to_dict(self):
        return {"max_gap": self.max_gap, "mean_gap": self.mean_gap, "gaps": self.gaps.tolist(),
                "j_star": self.j_star.tolist(), "j_policy": self.j_policy.tolist(),
                "contexts": self.contexts.tolist(), "n_episodes": self.n_episodes, "seed": self.seed}


def relative_gaps(j_star, j_policy):
    j_star = np.asarray(j_star, dtype=float)
    if np.any(np.abs(j_star) <= TOL["gap_baseline"]):
        raise DegenerateBaseline("|J*(c)| too close to zero for a relative gap")
    return (j_star - np.asarray(j_policy, dtype=float)) / np.abs(j_star)


def oracle_values(spec, eval_contexts, K, n_episodes, seed):
    """J*(c): average return of ``K`` at the true context (UP-true)."""
    K = K if isinstance(K, FixedContext) else FixedContext(K)
    ctx = np.atleast_2d(getattr(eval_contexts, "contexts", eval_contexts))
    return estimate_values(spec, ctx, K, n_episodes, make_rng(seed))


def robustness_gap(spec, eval_contexts, policy, j_star, n_episodes, seed=0) -> RobustnessReport:
    """Per-context relative return shortfall of ``policy`` versus ``j_star``.

    Evaluation reuses the start states drawn from ``seed``, so evaluating
    with the same seed as the oracle gives paired comparisons.
    """
    ctx = np.atleast_2d(getattr(eval_contexts, "contexts", eval_contexts))
    j_star = np.asarray(j_star, dtype=float)
    if np.any(np.abs(j_star) <= TOL["gap_baseline"]):
        raise DegenerateBaseline("|J*(c)| too close to zero for a relative gap")
    mean, std = estimate_values(spec, ctx, policy, n_episodes, make_rng(seed))
    return RobustnessReport(ctx, j_star, mean, std, relative_gaps(j_star, mean), n_episodes, seed)


# -- sweeps ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    alpha: float
    seed: int
    strategy: str = "random"


def _run_cell(args):
    spec, train_ctx, eval_ctx, K, plan, cell, j_star, eval_episodes, eval_seed = args
    plan = replace(plan, alpha=cell.alpha, strategy=cell.strategy)
    row = {"strategy": cell.strategy, "alpha": cell.alpha, "seed": cell.seed}
    try:
        res = run_training(spec, train_ctx, K, plan, seed=cell.seed)
        rep = robustness_gap(spec, eval_ctx, with_estimator(K, res.estimator, refresh=plan.refresh), j_star,
                             eval_episodes, eval_seed)
        row.update(max_gap=rep.max_gap, mean_gap=rep.mean_gap, error="",
                   final_loss=float(np.mean(res.logs[-1].losses[-20:])) if res.logs[-1].losses else float("nan"),
                   val_loss=res.logs[-1].val_loss)
    except (NonFiniteLoss, NonFiniteState, FloatingPointError, ValueError) as exc:
        row.update(max_gap=float("nan"), mean_gap=float("nan"), error=f"{type(exc).__name__}: {exc}",
                   final_loss=float("nan"), val_loss=None)
    return row


def worker_count(default=1) -> int:
    try:
        return max(1, int(os.environ.get("DELETION_LAB_THREADS", default)))
    except ValueError:
        return default


def run_cells(spec, train_ctx, eval_ctx, K, plan, cells, j_star, eval_episodes, eval_seed=0, workers=None):
    """Run independent (strategy, alpha, seed) cells; rows come back in cell order."""
    K = K.K if isinstance(K, FixedContext) else K
    jobs = [(spec, train_ctx, eval_ctx, K, plan, c, j_star, eval_episodes, eval_seed) for c in cells]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


ALPHA_GRID = (0.5, 0.8, 0.9, 1.0)


def summarize(rows, key="alpha"):
    """Mean/std of max_gap per value of ``key``, skipping failed cells."""
    out = {}
    for value in dict.fromkeys(r[key] for r in rows):
        gaps = np.array([r["max_gap"] for r in rows if r[key] == value and not r["error"]])
        out[value] = {"mean_gap": float(gaps.mean()) if gaps.size else float("nan"),
                      "std_gap": float(gaps.std()) if gaps.size else float("nan"),
                      "n": int(gaps.size),
                      "failed": sum(1 for r in rows if r[key] == value and r["error"])}
    return out


def sweep_alpha(spec, train_ctx, eval_ctx, K, plan, alphas=ALPHA_GRID, seeds=(0,),
                j_star=None, eval_episodes=4, eval_seed=0, workers=None):
    """Train one estimator per (alpha, seed); returns (rows, per-alpha summary)."""
    if not alphas:
        raise ValueError("empty alpha grid")
    if j_star is None:
        j_star, _ = oracle_values(spec, eval_ctx, K, eval_episodes, eval_seed)
    cells = [Cell(a, s, plan.strategy) for a in alphas for s in seeds]
    rows = run_cells(spec, train_ctx, eval_ctx, K, plan, cells, j_star, eval_episodes, eval_seed, workers)
    return rows, summarize(rows, "alpha")


def ablate_strategies(spec, train_ctx, eval_ctx, K, plan, strategies=("stale", "random", "uniform"),
                      alpha=0.8, seeds=(0,), j_star=None, eval_episodes=4, eval_seed=0, workers=None):
    """Compare deletion strategies at a shared retention fraction."""
    if j_star is None:
        j_star, _ = oracle_values(spec, eval_ctx, K, eval_episodes, eval_seed)
    cells = [Cell(alpha, s, st) for st in strategies for s in seeds]
    rows = run_cells(spec, train_ctx, eval_ctx, K, plan, cells, j_star, eval_episodes, eval_seed, workers)
    return rows, summarize(rows, "strategy")
