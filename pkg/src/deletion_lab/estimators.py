"""Windowed MLP and GRU context estimators with hand-written backprop.

Both map a state-action history to a context estimate and are trained on
the mean squared distance to the true context. All weights live in one flat
vector (``Estimator.weights``); named views into it come from ``unpack``.

MLP input at step t is the zero-padded window
``[s_t, s_{t-1}, ..., s_{t-k}, a_{t-1}, ..., a_{t-k}]``.
GRU input at step t is ``[s_t, a_{t-1}]`` and the hidden state carries the
rest of the history.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Estimator:
    arch: str                      # "mlp" or "gru"
    s_dim: int
    a_dim: int
    c_dim: int
    k: int = 4
    widths: tuple = (128, 32, 32)  # MLP hidden widths
    hidden: int = 32               # GRU hidden size
    weights: np.ndarray = field(default=None, repr=False)
    in_mean: np.ndarray = field(default=None, repr=False)   # per step-feature, length s_dim + a_dim
    in_std: np.ndarray = field(default=None, repr=False)
    out_mean: np.ndarray = field(default=None, repr=False)
    out_scale: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.arch not in ("mlp", "gru"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        f = self.s_dim + self.a_dim
        defaults = {"in_mean": np.zeros(f), "in_std": np.ones(f),
                    "out_mean": np.zeros(self.c_dim), "out_scale": np.ones(self.c_dim)}
        for name, value in defaults.items():
            cur = getattr(self, name)
            object.__setattr__(self, name, value if cur is None else np.asarray(cur, dtype=float))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.weights is None:
            object.__setattr__(self, "weights", np.zeros(self.n_weights))
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.n_weights,):
                raise ShapeMismatch(f"expected {self.n_weights} weights, got {w.shape}")
            object.__setattr__(self, "weights", w)

    # -- layout ------------------------------------------------------------

    @property
    def input_dim(self) -> int:
        if self.arch == "mlp":
            return (self.k + 1) * self.s_dim + self.k * self.a_dim
        return self.s_dim + self.a_dim

    @property
    def layout(self) -> list[tuple[str, tuple]]:
        if self.arch == "mlp":
            dims = (self.input_dim, *self.widths, self.c_dim)
            out = []
            for i in range(len(dims) - 1):
                out += [(f"W{i}", (dims[i], dims[i + 1])), (f"b{i}", (dims[i + 1],))]
            return out
        H, I = self.hidden, self.input_dim
        return [("Wx", (I, 3 * H)), ("bx", (3 * H,)), ("Uh", (H, 3 * H)), ("bh", (3 * H,)),
                ("Wo", (H, self.c_dim)), ("bo", (self.c_dim,))]

    @property
    def n_weights(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def unpack(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.weights if flat is None else flat
        out, i = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = flat[i:i + size].reshape(shape)
            i += size
        return out

    def with_weights(self, w) -> "Estimator":
        return replace(self, weights=np.asarray(w, dtype=float))

    # -- features ------------------------------------------------------------

    def step_features(self, states, actions):
        """Normalised GRU inputs ``[s_t, a_{t-1}]`` for one trajectory, shape (T, s+a)."""
        prev = np.vstack([np.zeros((1, self.a_dim)), actions[:-1]])
        return (np.hstack([states, prev]) - self.in_mean) / self.in_std

    def windows(self, states, actions):
        """Normalised MLP windows for every step of one trajectory, shape (T, D)."""
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float).reshape(states.shape[0], self.a_dim)
        T, k = states.shape[0], self.k
        s_pad = np.vstack([np.zeros((k, self.s_dim)), states])
        a_pad = np.vstack([np.zeros((k, self.a_dim)), actions])
        parts = [s_pad[k - j:k - j + T] for j in range(k + 1)]
        parts += [a_pad[k - j:k - j + T] for j in range(1, k + 1)]
        raw = np.hstack(parts)
        return (raw - self._window_mean) / self._window_std

    @property
    def _window_mean(self):
        s_m, a_m = self.in_mean[:self.s_dim], self.in_mean[self.s_dim:]
        return np.concatenate([np.tile(s_m, self.k + 1), np.tile(a_m, self.k)])

    @property
    def _window_std(self):
        s_s, a_s = self.in_std[:self.s_dim], self.in_std[self.s_dim:]
        return np.concatenate([np.tile(s_s, self.k + 1), np.tile(a_s, self.k)])

    def window_from_history(self, states, actions):
        """Raw history ``states`` = s_{t..t-k} (k+1 rows, newest first),
        ``actions`` = a_{t-1..t-k} (k rows); missing rows are zero-padded."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=float).reshape(-1, self.a_dim)
        if states.shape[1] != self.s_dim or states.shape[0] > self.k + 1 or actions.shape[0] > self.k:
            raise ShapeMismatch("history window does not match the estimator's k and dims")
        s = np.zeros((self.k + 1, self.s_dim)); s[:states.shape[0]] = states
        a = np.zeros((self.k, self.a_dim)); a[:actions.shape[0]] = actions
        raw = np.concatenate([s.ravel(), a.ravel()])
        return (raw - self._window_mean) / self._window_std

    # -- prediction ------------------------------------------------------------

    def predict_windows(self, X, weights=None):
        if self.arch != "mlp":
            raise ShapeMismatch("predict_windows is MLP-only")
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ShapeMismatch(f"window width {X.shape[1]} != {self.input_dim}")
        out, _ = _mlp_forward(self.unpack(weights), X, len(self.widths))
        return self.out_mean + self.out_scale * out

    def predict_sequence(self, X, weights=None):
        """GRU estimates for every step of normalised input sequences (B, T, I) or (T, I)."""
        if self.arch != "gru":
            raise ShapeMismatch("predict_sequence is GRU-only")
        single = X.ndim == 2
        X = X[None] if single else X
        if X.shape[2] != self.input_dim:
            raise ShapeMismatch(f"step width {X.shape[2]} != {self.input_dim}")
        out, _ = _gru_forward(self.unpack(weights), X, self.hidden)
        out = self.out_mean + self.out_scale * out
        return out[0] if single else out

    def predict(self, states, actions):
        """Estimate at every step of a trajectory (prefix); returns (T, c_dim)."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=float).reshape(states.shape[0], self.a_dim)
        if states.shape[1] != self.s_dim:
            raise ShapeMismatch(f"state width {states.shape[1]} != {self.s_dim}")
        if self.arch == "mlp":
            return self.predict_windows(self.windows(states, actions))
        return self.predict_sequence(self.step_features(states, actions))

    def tracker(self, n: int) -> "Tracker":
        return Tracker(self, n)

    # -- loss ------------------------------------------------------------------

    def loss_and_grad(self, batch, weights=None):
        """Mean squared distance and its exact gradient w.r.t. the flat weights.

        MLP ``batch`` = (windows (B, D), targets (B, c)).
        GRU ``batch`` = (inputs (B, T, I), targets (B, c)[, mask (B, T)]).
        """
        w = self.weights if weights is None else weights
        p = self.unpack(w)
        if self.arch == "mlp":
            X, C = batch
            X, C = np.atleast_2d(X), np.atleast_2d(C)
            if X.shape[0] == 0:
                raise ValueError("empty batch")
            out, cache = _mlp_forward(p, X, len(self.widths))
            diff = self.out_mean + self.out_scale * out - C
            loss = float(np.mean(np.sum(diff ** 2, axis=1)))
            dout = 2.0 * diff * self.out_scale / X.shape[0]
            grads = _mlp_backward(p, cache, dout, len(self.widths))
        else:
            X, C = batch[0], batch[1]
            if X.shape[0] == 0:
                raise ValueError("empty batch")
            mask = batch[2] if len(batch) > 2 and batch[2] is not None else np.ones(X.shape[:2])
            wts = mask / mask.sum()
            out, cache = _gru_forward(p, X, self.hidden)
            diff = self.out_mean + self.out_scale * out - C[:, None, :]
            loss = float(np.sum(wts * np.sum(diff ** 2, axis=2)))
            dout = 2.0 * diff * self.out_scale * wts[:, :, None]
            grads = _gru_backward(p, cache, dout, self.hidden)
        if not np.isfinite(loss):
            raise NonFiniteLoss("non-finite estimator loss")
        flat = np.concatenate([grads[name].ravel() for name, _ in self.layout])
        return loss, flat

    # -- persistence --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION, "kind": "estimator", "arch": self.arch,
            "s_dim": self.s_dim, "a_dim": self.a_dim, "c_dim": self.c_dim, "k": self.k,
            "widths": list(self.widths), "hidden": self.hidden,
            "weights": self.weights.tolist(), "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(), "out_mean": self.out_mean.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Estimator":
        if d.get("version") != CHECKPOINT_VERSION or d.get("kind") != "estimator":
            raise ValueError("unsupported estimator checkpoint")
        d = {key: value for key, value in d.items() if key not in ("version", "kind")}
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_estimator(arch, s_dim, a_dim, c_dim, rng=None, k=4, widths=(128, 32, 32), hidden=32, **kw):
    """Estimator with random initial weights (zeros when ``rng`` is None)."""
    est = Estimator(arch, s_dim, a_dim, c_dim, k=k, widths=widths, hidden=hidden, **kw)
    if rng is None:
        return est
    parts = []
    for name, shape in est.layout:
        if name.startswith("b"):
            parts.append(np.zeros(shape))
        else:
            fan_in = shape[0]
            parts.append(rng.standard_normal(shape) / np.sqrt(fan_in))
    return est.with_weights(np.concatenate([p.ravel() for p in parts]))


# -- MLP ------------------------------------------------------------------------

def _mlp_forward(p, X, n_hidden):
    acts = [X]
    h = X
    for i in range(n_hidden):
        h = np.tanh(h @ p[f"W{i}"] + p[f"b{i}"])
        acts.append(h)
    out = h @ p[f"W{n_hidden}"] + p[f"b{n_hidden}"]
    return out, acts


def _mlp_backward(p, acts, dout, n_hidden):
    grads = {}
    delta = dout
    for i in range(n_hidden, -1, -1):
        grads[f"W{i}"] = acts[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ p[f"W{i}"].T) * (1.0 - acts[i] ** 2)
    return grads


# -- GRU ------------------------------------------------------------------------
# r = sig(x Wx_r + bx_r + h Uh_r + bh_r)
# z = sig(x Wx_z + bx_z + h Uh_z + bh_z)
# n = tanh(x Wx_n + bx_n + r * (h Uh_n + bh_n))
# h' = (1 - z) * n + z * h ;  out = h' Wo + bo

def _gru_forward(p, X, H):
    B, T, _ = X.shape
    gx = X @ p["Wx"] + p["bx"]                      # (B, T, 3H)
    h = np.zeros((B, H))
    hs = np.empty((T + 1, B, H)); hs[0] = h
    rs = np.empty((T, B, H)); zs = np.empty((T, B, H)); ns = np.empty((T, B, H)); ghn = np.empty((T, B, H))
    Uh, bh = p["Uh"], p["bh"]
    for t in range(T):
        gh = h @ Uh + bh
        g = gx[:, t]
        r = _sigmoid(g[:, :H] + gh[:, :H])
        z = _sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        rs[t], zs[t], ns[t], ghn[t], hs[t + 1] = r, z, n, gh[:, 2 * H:], h
    hseq = hs[1:].transpose(1, 0, 2)                # (B, T, H)
    out = hseq @ p["Wo"] + p["bo"]
    return out, (X, hs, rs, zs, ns, ghn, hseq)


def _gru_backward(p, cache, dout, H):
    X, hs, rs, zs, ns, ghn, hseq = cache
    B, T, _ = X.shape
    grads = {"Wo": np.einsum("bth,btc->hc", hseq, dout), "bo": dout.sum(axis=(0, 1))}
    dH = (dout @ p["Wo"].T).transpose(1, 0, 2)     # (T, B, H)
    Uh = p["Uh"]
    dUh = np.zeros_like(Uh)
    dbh = np.zeros(3 * H)
    dgx = np.empty((T, B, 3 * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        r, z, n, h_prev = rs[t], zs[t], ns[t], hs[t]
        dz = dh * (h_prev - n)
        dan = dh * (1.0 - z) * (1.0 - n ** 2)
        dar = dan * ghn[t] * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dgx[t] = np.concatenate([dar, daz, dan], axis=1)
        dUh += h_prev.T @ dgh
        dbh += dgh.sum(axis=0)
        dh_next = dh * z + dgh @ Uh.T
    grads["Wx"] = np.einsum("bti,tbg->ig", X, dgx)
    grads["bx"] = dgx.sum(axis=(0, 1))
    grads["Uh"] = dUh
    grads["bh"] = dbh
    return grads


# -- online tracking ---------------------------------------------------------------

class Tracker:
    """Step-by-step estimates for a batch of ``n`` live episodes."""

    def __init__(self, est: Estimator, n: int):
        self.est, self.n = est, n
        self.t = 0
        if est.arch == "mlp":
            self.s_hist = np.zeros((n, est.k + 1, est.s_dim))
            self.a_hist = np.zeros((n, max(est.k, 1), est.a_dim))
            self._p = est.unpack()
        else:
            self.h = np.zeros((n, est.hidden))
            self._p = est.unpack()

    def update(self, states, prev_actions):
        """Feed s_t and a_{t-1}; returns the estimate c_hat_t for every episode."""
        est = self.est
        states = np.asarray(states, dtype=float)
        prev_actions = np.asarray(prev_actions, dtype=float).reshape(self.n, est.a_dim)
        if est.arch == "mlp":
            self.s_hist = np.roll(self.s_hist, 1, axis=1)
            self.s_hist[:, 0] = states
            if est.k > 0 and self.t > 0:
                self.a_hist = np.roll(self.a_hist, 1, axis=1)
                self.a_hist[:, 0] = prev_actions
            raw = np.concatenate([self.s_hist.reshape(self.n, -1),
                                  self.a_hist[:, :est.k].reshape(self.n, -1)], axis=1)
            X = (raw - est._window_mean) / est._window_std
            out, _ = _mlp_forward(self._p, X, len(est.widths))
        else:
            x = (np.hstack([states, prev_actions]) - est.in_mean) / est.in_std
            p, H = self._p, est.hidden
            g = x @ p["Wx"] + p["bx"]
            gh = self.h @ p["Uh"] + p["bh"]
            r = _sigmoid(g[:, :H] + gh[:, :H])
            z = _sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
            nn = np.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
            self.h = (1.0 - z) * nn + z * self.h
            out = self.h @ p["Wo"] + p["bo"]
        self.t += 1
        return est.out_mean + est.out_scale * out


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 64          # windows (MLP) or whole trajectories (GRU)
    steps: int = 500
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def fit_normalization(est: Estimator, trajectories) -> Estimator:
    """Per-feature input statistics and target statistics from ``trajectories``."""
    feats = np.vstack([np.hstack([tr.states, np.vstack([np.zeros((1, est.a_dim)), tr.actions[:-1]])])
                       for tr in trajectories])
    ctx = np.vstack([tr.context for tr in trajectories])
    in_std = feats.std(axis=0)
    out_scale = ctx.std(axis=0)
    return replace(
        est,
        in_mean=feats.mean(axis=0), in_std=np.where(in_std > 1e-8, in_std, 1.0),
        out_mean=ctx.mean(axis=0), out_scale=np.where(out_scale > 1e-8, out_scale, 1.0),
    )


def window_dataset(est: Estimator, trajectories):
    X = np.vstack([est.windows(tr.states, tr.actions) for tr in trajectories])
    C = np.vstack([np.repeat(tr.context[None], len(tr), axis=0) for tr in trajectories])
    return X, C


def sequence_batch(est: Estimator, trajectories):
    """Pad trajectories to a common length; returns (inputs, targets, mask)."""
    T = max(len(tr) for tr in trajectories)
    X = np.zeros((len(trajectories), T, est.input_dim))
    mask = np.zeros((len(trajectories), T))
    for i, tr in enumerate(trajectories):
        X[i, :len(tr)] = est.step_features(tr.states, tr.actions)
        mask[i, :len(tr)] = 1.0
    C = np.vstack([tr.context for tr in trajectories])
    return X, C, mask


def dataset_loss(est: Estimator, trajectories) -> float:
    """Mean squared context error over every step of ``trajectories``."""
    if est.arch == "mlp":
        X, C = window_dataset(est, trajectories)
        return float(np.mean(np.sum((est.predict_windows(X) - C) ** 2, axis=1)))
    X, C, mask = sequence_batch(est, trajectories)
    err = np.sum((est.predict_sequence(X) - C[:, None, :]) ** 2, axis=2)
    return float(np.sum(err * mask) / mask.sum())


def train_round(est: Estimator, view, cfg: TrainConfig, rng=None, log: list | None = None) -> Estimator:
    """``cfg.steps`` momentum-SGD updates on minibatches drawn from ``view``.

    MLP minibatches are windows sampled with replacement from all steps of
    the view; GRU minibatches are whole trajectories. Per-step losses are
    appended to ``log`` when given.
    """
    from .numerics import make_rng

    view = list(view)
    if not view:
        raise ValueError("empty training view")
    if cfg.steps == 0:
        return est
    rng = make_rng(cfg.seed) if rng is None else rng
    w = est.weights.copy()
    vel = np.zeros_like(w)
    if est.arch == "mlp":
        X, C = window_dataset(est, view)
        n = X.shape[0]
    else:
        n = len(view)
        cache = {}
    for step in range(cfg.steps):
        if est.arch == "mlp":
            idx = rng.integers(0, n, min(cfg.batch_size, n))
            batch = (X[idx], C[idx])
        else:
            idx = rng.integers(0, n, cfg.batch_size)
            for i in idx:
                if i not in cache:
                    cache[i] = sequence_batch(est, [view[i]])
            batch = _stack_sequences([cache[i] for i in idx])
        try:
            loss, g = est.loss_and_grad(batch, w)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"non-finite loss at step {step}") from exc
        if cfg.clip_norm is not None:
            norm = np.linalg.norm(g)
            if norm > cfg.clip_norm:
                g = g * (cfg.clip_norm / norm)
        vel = cfg.momentum * vel + g
        w = w - cfg.lr * vel
        if log is not None:
            log.append(loss)
    if not np.all(np.isfinite(w)):
        raise NonFiniteLoss("weights became non-finite")
    return est.with_weights(w)


def _stack_sequences(parts):
    T = max(p[0].shape[1] for p in parts)
    B = len(parts)
    X = np.zeros((B, T, parts[0][0].shape[2]))
    mask = np.zeros((B, T))
    for i, (x, _, m) in enumerate(parts):
        X[i, :x.shape[1]] = x[0]
        mask[i, :x.shape[1]] = m[0]
    C = np.vstack([p[1] for p in parts])
    return X, C, mask


def gradient_check(est: Estimator, batch, coords=None, h=1e-5, floor=1e-7):
    """Per-coordinate relative error between analytic and central-difference gradients.

    Returns (errors, analytic, numeric) over ``coords`` (all weights by default).
    The denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    w = est.weights
    _, g = est.loss_and_grad(batch, w)
    coords = np.arange(w.size) if coords is None else np.asarray(coords)
    num = np.empty(coords.size)
    for j, c in enumerate(coords):
        wp, wm = w.copy(), w.copy()
        wp[c] += h
        wm[c] -= h
        num[j] = (est.loss_and_grad(batch, wp)[0] - est.loss_and_grad(batch, wm)[0]) / (2 * h)
    ana = g[coords]
    err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    return err, ana, num
