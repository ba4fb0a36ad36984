import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deletion_lab.numerics import (
    TOL, NotSPD, child_seeds, make_rng, solve_spd, split_rng, sym_eig, uniform_subset,
)


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


def test_solve_identity():
    assert np.allclose(solve_spd(np.eye(3), np.array([1.0, 2.0, 3.0])), [1, 2, 3])


def test_solve_diagonal():
    assert np.allclose(solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1, 1])


def test_solve_rejects_indefinite():
    with pytest.raises(NotSPD):
        solve_spd(np.diag([1.0, -1.0]), np.ones(2))


def test_solve_rejects_asymmetric():
    with pytest.raises(NotSPD):
        solve_spd(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 64), seed=st.integers(0, 2**32 - 1))
def test_solve_residual(d, seed):
    rng = make_rng(seed)
    A = random_spd(rng, d)
    b = rng.standard_normal(d)
    x = solve_spd(A, b)
    assert np.linalg.norm(A @ x - b) <= TOL["solve_residual"] * np.linalg.norm(b)


def test_eig_diagonal():
    mu, U = sym_eig(np.diag([1.0, 3.0]))
    assert np.allclose(mu, [3, 1])
    assert np.allclose(np.abs(U), [[0, 1], [1, 0]])


def test_eig_rank_one():
    x = np.array([1.0, 2.0, 2.0])
    mu, _ = sym_eig(np.outer(x, x))
    assert np.allclose(mu, [9.0, 0.0, 0.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 32), seed=st.integers(0, 2**32 - 1))
def test_eig_reconstruction_and_orthonormality(d, seed):
    rng = make_rng(seed)
    B = rng.standard_normal((d, d))
    A = B + B.T
    mu, U = sym_eig(A)
    scale = max(1.0, np.abs(A).max())
    assert np.all(np.diff(mu) <= 0)
    assert np.abs(U.T @ U - np.eye(d)).max() <= TOL["eig_orthonormal"]
    assert np.abs(U @ np.diag(mu) @ U.T - A).max() <= TOL["eig_residual"] * scale
    assert np.abs(A @ U - U * mu).max() <= TOL["eig_residual"] * scale


def test_subset_keep_all_and_none():
    rng = make_rng(0)
    assert list(uniform_subset(rng, 5, 5)) == [0, 1, 2, 3, 4]
    assert len(uniform_subset(rng, 10, 0)) == 0


def test_subset_rejects_oversize():
    with pytest.raises(ValueError):
        uniform_subset(make_rng(0), 3, 4)


def test_subset_frequency():
    rng = make_rng(1)
    counts = np.zeros(10)
    for _ in range(100_000):
        counts[uniform_subset(rng, 10, 8)] += 1
    assert np.all(np.abs(counts / 100_000 - 0.8) <= 0.01)


def test_rng_reproducible():
    assert np.array_equal(make_rng(42).random(100), make_rng(42).random(100))
    assert not np.array_equal(make_rng(42).random(10), make_rng(43).random(10))


def test_split_streams_reproducible_and_distinct():
    a = [g.random(5) for g in split_rng(make_rng(3), 3)]
    b = [g.random(5) for g in split_rng(make_rng(3), 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])
    s1, s2 = child_seeds(9, 2)
    assert make_rng(s1).random() != make_rng(s2).random()
