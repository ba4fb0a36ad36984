import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from deletion_lab.buffer import Trajectory
from deletion_lab.estimators import (
    Estimator, NonFiniteLoss, ShapeMismatch, TrainConfig, dataset_loss, fit_normalization, gradient_check,
    make_estimator, sequence_batch, train_round, window_dataset,
)
from deletion_lab.numerics import make_rng


def random_trajs(rng, n=6, T=12, s=3, a=1, c=2):
    return [Trajectory(rng.standard_normal((T, s)), rng.standard_normal((T, a)), rng.standard_normal(c))
            for _ in range(n)]


def test_window_layout():
    est = Estimator("mlp", 2, 1, 1, k=2, widths=(4,))
    assert est.input_dim == 3 * 2 + 2 * 1
    states = np.arange(8.0).reshape(4, 2)
    actions = np.array([[10.0], [11.0], [12.0], [13.0]])
    W = est.windows(states, actions)
    # t = 2: s2, s1, s0, a1, a0
    assert np.array_equal(W[2], [4, 5, 2, 3, 0, 1, 11, 10])
    # t = 0: zero padding below index 0
    assert np.array_equal(W[0], [0, 1, 0, 0, 0, 0, 0, 0])
    assert np.array_equal(est.window_from_history(states[2::-1], actions[1::-1]), W[2])


def test_zero_mlp_predicts_zero():
    est = make_estimator("mlp", 3, 1, 2)
    assert np.array_equal(est.predict(np.ones((5, 3)), np.ones((5, 1))), np.zeros((5, 2)))


def test_gru_bias_pathway_constant():
    rng = make_rng(0)
    est = make_estimator("gru", 3, 1, 2, rng, hidden=5)
    p = est.unpack()
    p["bo"][:] = [0.7, -1.3]
    w = np.concatenate([p[name].ravel() for name, _ in est.layout])
    est = est.with_weights(w)
    for T in (1, 4, 30):
        out = est.predict_sequence(np.zeros((T, 4)))
        assert np.allclose(out, [0.7, -1.3], atol=0)


def test_gru_single_cell_by_hand():
    est = make_estimator("gru", 1, 1, 1, make_rng(2), hidden=1)
    p = {k: v.copy() for k, v in est.unpack().items()}
    p["bx"][:] = [0.2, -0.4, 0.3]
    p["bh"][:] = [0.1, 0.5, -0.2]
    est = est.with_weights(np.concatenate([p[name].ravel() for name, _ in est.layout]))
    sig = lambda v: 1 / (1 + np.exp(-v))
    r, z = sig(0.2 + 0.1), sig(-0.4 + 0.5)
    n = np.tanh(0.3 + r * -0.2)
    h = (1 - z) * n
    out = est.predict_sequence(np.zeros((1, 2)))
    assert out[0, 0] == pytest.approx(h * p["Wo"][0, 0] + p["bo"][0], abs=1e-14)


def test_identical_windows_identical_predictions():
    est = make_estimator("mlp", 3, 1, 2, make_rng(1))
    X = np.tile(make_rng(2).standard_normal(est.input_dim), (4, 1))
    out = est.predict_windows(X)
    assert np.all(out == out[0])


def test_shape_errors():
    est = make_estimator("mlp", 3, 1, 2)
    with pytest.raises(ShapeMismatch):
        est.predict(np.ones((4, 2)), np.ones((4, 1)))
    with pytest.raises(ShapeMismatch):
        est.predict_windows(np.ones((2, 5)))
    with pytest.raises(ShapeMismatch):
        est.window_from_history(np.ones((9, 3)), np.ones((2, 1)))
    with pytest.raises(ShapeMismatch):
        Estimator("mlp", 3, 1, 2, weights=np.zeros(3))
    gru = make_estimator("gru", 3, 1, 2)
    with pytest.raises(ShapeMismatch):
        gru.predict_sequence(np.ones((4, 3)))


def test_exact_prediction_zero_loss_and_grad():
    c = np.array([1.5, -2.0])
    est = replace(make_estimator("mlp", 3, 1, 2), out_mean=c)
    X = make_rng(0).standard_normal((7, est.input_dim))
    loss, g = est.loss_and_grad((X, np.tile(c, (7, 1))))
    assert loss == 0 and np.all(g == 0)


def test_linear_unit_by_hand():
    est = Estimator("mlp", 1, 0, 1, k=0, widths=(), weights=np.array([1.0, 0.0]))
    loss, g = est.loss_and_grad((np.array([[2.0]]), np.array([[1.0]])))
    assert loss == 1.0 and g[0] == 4.0


def test_non_finite_loss():
    est = make_estimator("mlp", 1, 1, 1)
    with pytest.raises(NonFiniteLoss):
        est.loss_and_grad((np.full((1, est.input_dim), np.nan), np.zeros((1, 1))))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), arch=st.sampled_from(["mlp", "gru"]))
def test_gradients_match_finite_differences(seed, arch):
    rng = make_rng(seed)
    est = make_estimator(arch, 3, 1, 2, rng, k=2, widths=(6, 5), hidden=4)
    est = est.with_weights(est.weights + 0.3 * rng.standard_normal(est.n_weights))
    est = replace(est, out_scale=np.array([1.5, 0.5]), out_mean=np.array([0.3, -0.1]))
    trajs = random_trajs(rng, n=3, T=int(rng.integers(2, 7)))
    if arch == "mlp":
        batch = window_dataset(est, trajs)
    else:
        batch = sequence_batch(est, trajs)
    err, _, _ = gradient_check(est, batch)
    assert err.max() <= 1e-4


def test_gru_masked_gradients():
    rng = make_rng(9)
    est = make_estimator("gru", 2, 1, 1, rng, hidden=3)
    trajs = [Trajectory(rng.standard_normal((T, 2)), rng.standard_normal((T, 1)), rng.standard_normal(1))
             for T in (2, 5, 3)]
    err, _, _ = gradient_check(est, sequence_batch(est, trajs))
    assert err.max() <= 1e-4


def test_gru_causal():
    rng = make_rng(4)
    est = make_estimator("gru", 3, 1, 2, rng, hidden=6)
    X = rng.standard_normal((10, 4))
    Y = X.copy()
    Y[6:] += rng.standard_normal((4, 4))
    a, b = est.predict_sequence(X), est.predict_sequence(Y)
    assert np.array_equal(a[:6], b[:6])
    assert not np.allclose(a[6:], b[6:])


@pytest.mark.parametrize("arch", ["mlp", "gru"])
def test_normalisation_scale_invariance(arch):
    rng = make_rng(5)
    trajs = random_trajs(rng, n=4)
    est = fit_normalization(make_estimator(arch, 3, 1, 2, rng, k=3, widths=(8,), hidden=5), trajs)
    scale = np.array([2.0, 0.5, 10.0, 3.0])
    scaled = replace(est, in_mean=est.in_mean * scale, in_std=est.in_std * scale)
    for tr in trajs:
        a = est.predict(tr.states, tr.actions)
        b = scaled.predict(tr.states * scale[:3], tr.actions * scale[3:])
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("arch", ["mlp", "gru"])
def test_tracker_matches_batch_prediction(arch):
    rng = make_rng(6)
    est = fit_normalization(make_estimator(arch, 3, 1, 2, rng, k=3, widths=(8,), hidden=5), random_trajs(rng))
    trajs = random_trajs(rng, n=3, T=9)
    tracker = est.tracker(3)
    online = []
    for t in range(9):
        s = np.stack([tr.states[t] for tr in trajs])
        prev = np.stack([tr.actions[t - 1] if t else np.zeros(1) for tr in trajs])
        online.append(tracker.update(s, prev))
    online = np.stack(online, axis=1)
    for i, tr in enumerate(trajs):
        assert np.allclose(online[i], est.predict(tr.states, tr.actions), atol=1e-12)


def test_train_round_zero_steps_and_determinism():
    rng = make_rng(7)
    trajs = random_trajs(rng)
    est = make_estimator("mlp", 3, 1, 2, rng, widths=(8,))
    assert train_round(est, trajs, TrainConfig(steps=0)) is est
    cfg = TrainConfig(steps=30, batch_size=8)
    a = train_round(est, trajs, cfg, make_rng(1))
    b = train_round(est, trajs, cfg, make_rng(1))
    assert np.array_equal(a.weights, b.weights)
    with pytest.raises(ValueError):
        train_round(est, [], cfg)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_train_round_fits_linear_target():
    rng = make_rng(8)
    A = rng.standard_normal((2, 3))
    S = rng.standard_normal((400, 3))
    C = S @ A.T + 0.1 * rng.standard_normal((400, 2))
    trajs = [Trajectory(S[i:i + 1], np.zeros((1, 1)), C[i]) for i in range(400)]
    est = fit_normalization(make_estimator("mlp", 3, 1, 2, rng, k=0, widths=(16,)), trajs)
    coef, *_ = np.linalg.lstsq(np.hstack([S, np.ones((400, 1))]), C, rcond=None)
    floor = np.mean(np.sum((np.hstack([S, np.ones((400, 1))]) @ coef - C) ** 2, axis=1))
    trained = train_round(est, trajs, TrainConfig(lr=0.005, steps=6000, batch_size=32), make_rng(0))
    assert dataset_loss(trained, trajs) <= 1.5 * floor


def test_gru_training_lowers_loss():
    rng = make_rng(10)
    trajs = random_trajs(rng, n=8, T=10)
    est = fit_normalization(make_estimator("gru", 3, 1, 2, rng, hidden=6), trajs)
    log = []
    trained = train_round(est, trajs, TrainConfig(lr=0.05, steps=150, batch_size=4), make_rng(0), log)
    assert len(log) == 150
    assert dataset_loss(trained, trajs) < dataset_loss(est, trajs)


def test_checkpoint_round_trip(tmp_path):
    est = fit_normalization(make_estimator("gru", 3, 1, 2, make_rng(0), hidden=4), random_trajs(make_rng(1)))
    est.save(tmp_path / "e.json")
    back = Estimator.load(tmp_path / "e.json")
    X = make_rng(2).standard_normal((5, 4))
    assert np.array_equal(est.predict_sequence(X), back.predict_sequence(X))
    bad = est.to_dict()
    bad["version"] = 99
    with pytest.raises(ValueError):
        Estimator.from_dict(bad)
