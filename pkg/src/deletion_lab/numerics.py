"""Small dense linear algebra and seeded random streams.

Everything here works on float64 numpy arrays. Random streams are numpy
``Generator`` objects backed by the counter-based Philox bit generator, so a
stream is fully determined by its seed and child streams can be split off
without touching the parent's sequence.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg as sla

# Centralised numerical tolerances.
TOL = {
    "spd_symmetry": 1e-10,
    "solve_residual": 1e-8,
    "eig_residual": 1e-8,
    "eig_orthonormal": 1e-10,
    "fit_gradient": 1e-10,
    "gap_baseline": 1e-6,
}


class NumericsError(RuntimeError):
    pass


class NotSPD(NumericsError):
    pass


class NoConvergence(NumericsError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Philox-backed generator; ``seed`` may be an int or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; deterministic given the parent's seed."""
    return list(rng.spawn(n))


def child_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(seed)).spawn(n)


def _check_square(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    a = _check_square(a)
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > TOL["spd_symmetry"] * scale:
        raise NotSPD("matrix is not symmetric")
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from None
    return sla.cho_solve(factor, np.asarray(b, dtype=float), check_finite=False)


def sym_eig(a):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Returns ``(values, vectors)`` with ``vectors[:, j]`` the unit eigenvector
    for ``values[j]``.
    """
    a = _check_square(a)
    a = 0.5 * (a + a.T)
    try:
        vals, vecs = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from None
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def uniform_subset(rng: np.random.Generator, n: int, keep: int) -> np.ndarray:
    """Sorted indices of a uniformly random ``keep``-subset of ``range(n)``."""
    if not 0 <= keep <= n:
        raise ValueError(f"keep={keep} must lie in [0, {n}]")
    if keep == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=keep, replace=False))
