"""Round-tagged trajectory buffer with deletion strategies.

Three strategies are supported, each parameterised by the retention
fraction ``alpha``:

* ``random``  - after every round keep a uniformly random ceil(alpha*n) subset.
* ``stale``   - after every round keep the ceil(alpha*n) newest trajectories.
* ``uniform`` - never delete; every training view is a fresh uniform sample.

All three expose training views of the same size. The buffer tracks a
``budget`` that follows the size a permanently-deleting buffer would have
(``budget <- ceil(alpha*budget)`` at the end of a round, ``+1`` per insert);
for ``random`` and ``stale`` this is just ``len(buffer)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import uniform_subset

STRATEGIES = ("random", "stale", "uniform")


class EmptyBuffer(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray   # (T, s_dim)
    actions: np.ndarray  # (T, a_dim)
    context: np.ndarray  # (c_dim,)
    round: int = 1

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        actions = np.asarray(self.actions, dtype=float)
        if actions.ndim == 1:
            actions = actions[:, None]
        context = np.atleast_1d(np.asarray(self.context, dtype=float))
        if states.shape[0] < 1 or states.shape[0] != actions.shape[0]:
            raise ValueError(
                f"states and actions need equal length >= 1, got {states.shape[0]} and {actions.shape[0]}")
        if not np.all(np.isfinite(context)):
            raise ValueError("context must be finite")
        if self.round < 1:
            raise ValueError("round tags start at 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "context", context)

    def __len__(self):
        return self.states.shape[0]


def keep_count(alpha: float, n: int) -> int:
    # round before ceil so that e.g. 0.8*5 does not become 5
    return min(n, math.ceil(round(alpha * n, 9)))


@dataclass
class TrajectoryBuffer:
    strategy: str = "random"
    alpha: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.Generator(np.random.Philox(0)))
    items: list = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        self.items = list(self.items)
        self._ids = list(range(len(self.items)))
        self._next_id = len(self.items)
        self.budget = len(self.items)

    def __len__(self):
        return len(self.items)

    @property
    def ids(self) -> list[int]:
        """Insertion serial numbers of the stored trajectories."""
        return list(self._ids)

    @property
    def rounds(self) -> np.ndarray:
        return np.array([tr.round for tr in self.items], dtype=int)

    def add(self, traj: Trajectory) -> None:
        if self.items and traj.round < self.items[-1].round:
            raise ValueError("round tags must be non-decreasing in insertion order")
        self.items.append(traj)
        self._ids.append(self._next_id)
        self._next_id += 1
        self.budget += 1

    def extend(self, trajs) -> None:
        trajs = list(trajs)
        last = self.items[-1].round if self.items else -math.inf
        for tr in trajs:
            if tr.round < last:
                raise ValueError("round tags must be non-decreasing in insertion order")
            last = tr.round
        self.items.extend(trajs)
        self._ids.extend(range(self._next_id, self._next_id + len(trajs)))
        self._next_id += len(trajs)
        self.budget += len(trajs)

    def _keep(self, idx) -> None:
        self.items = [self.items[i] for i in idx]
        self._ids = [self._ids[i] for i in idx]

    def end_of_round(self) -> "TrajectoryBuffer":
        """Apply the strategy's end-of-round deletion in place; returns self."""
        n = len(self.items)
        if n == 0:
            raise EmptyBuffer("end_of_round on an empty buffer")
        self.budget = keep_count(self.alpha, self.budget)
        if self.strategy == "random":
            self._keep(uniform_subset(self.rng, n, keep_count(self.alpha, n)))
        elif self.strategy == "stale":
            keep = keep_count(self.alpha, n)
            # newest first: highest round, then latest insertion
            order = sorted(range(n), key=lambda i: (self.items[i].round, i), reverse=True)
            self._keep(sorted(order[:keep]))
        return self

    def training_view(self) -> list[Trajectory]:
        if not self.items:
            raise EmptyBuffer("training_view on an empty buffer")
        if self.strategy != "uniform":
            return list(self.items)
        idx = uniform_subset(self.rng, len(self.items), min(self.budget, len(self.items)))
        return [self.items[i] for i in idx]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        save_trajectories(self.items, path)

    @classmethod
    def load(cls, path, **kwargs) -> "TrajectoryBuffer":
        return cls(items=load_trajectories(path), **kwargs)


def survival_table(alpha: float, rounds: int) -> dict[int, float]:
    """Probability that a round-1 trajectory is still stored at round r."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return {r: alpha ** (r - 1) for r in range(1, rounds + 1)}


def trajectory_record(tr: Trajectory) -> dict:
    return {
        "round": int(tr.round),
        "context": tr.context.tolist(),
        "T": len(tr),
        "s_dim": tr.states.shape[1],
        "a_dim": tr.actions.shape[1],
        "states": tr.states.ravel().tolist(),
        "actions": tr.actions.ravel().tolist(),
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    T = rec["T"]
    return Trajectory(
        states=np.asarray(rec["states"], dtype=float).reshape(T, rec["s_dim"]),
        actions=np.asarray(rec["actions"], dtype=float).reshape(T, rec["a_dim"]),
        context=np.asarray(rec["context"], dtype=float),
        round=int(rec["round"]),
    )


def save_trajectories(trajs, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for tr in trajs:
            fh.write(json.dumps(trajectory_record(tr)) + "\n")
    tmp.replace(path)


def load_trajectories(path) -> list[Trajectory]:
    with open(path) as fh:
        return [trajectory_from_record(json.loads(line)) for line in fh if line.strip()]


def survival_frequencies(alpha: float, rounds: int, per_round: int = 625, replays: int = 10_000,
                         seed: int = 0) -> dict[int, float]:
    """Monte Carlo counterpart of :func:`survival_table` under random deletion.

    Each replay adds ``per_round`` trajectories per round and deletes at the
    end of every round but the last; returns the fraction of round-1
    trajectories present at round r, averaged over replays.
    """
    dummy = [Trajectory(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), r) for r in range(1, rounds + 1)]
    counts = np.zeros(rounds)
    root = np.random.SeedSequence(seed)
    for child in root.spawn(replays):
        buf = TrajectoryBuffer("random", alpha, np.random.Generator(np.random.Philox(child)))
        for r in range(1, rounds + 1):
            buf.extend([dummy[r - 1]] * per_round)
            counts[r - 1] += np.count_nonzero(np.asarray(buf._ids) < per_round)
            if r < rounds:
                buf.end_of_round()
    return {r: counts[r - 1] / (replays * per_round) for r in range(1, rounds + 1)}
