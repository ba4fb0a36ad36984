"""Leave-one-out deletion analysis for regularised ERM.

The objective is ``F_S(w) = sum_i l(w; z_i) + lam * ||w||^2`` with either the
squared loss (``ridge``) or the logistic loss on labels in {-1, +1}
(``logistic``). Every solve goes through one weighted solver: full data has
all sample weights 1, deleting point i sets its weight to 0 and the deletion
path ``F_S - t * l(.; z_i)`` sets it to ``1 - t``.

Test risk ``L(w)`` comes from a declared test distribution, either
:class:`GaussianTest` (noiseless linear labels, second moment ``cov``;
squared loss only) or :class:`EmpiricalTest` (a finite test sample).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import NotSPD, TOL, solve_spd, sym_eig

FAMILIES = ("ridge", "logistic")


class SolverFailure(RuntimeError):
    pass


# -- test distributions -----------------------------------------------------------

@dataclass(frozen=True)
class GaussianTest:
    """Test law with ``E[x x^T] = cov`` and ``y = target^T x + noise``.

    Under the squared loss ``L(w) = (w - target)^T cov (w - target) + noise_var``.
    """
    target: np.ndarray
    cov: np.ndarray | None = None
    noise_var: float = 0.0

    def _cov(self, d):
        return np.eye(d) if self.cov is None else np.asarray(self.cov, dtype=float)

    def loss(self, family, w):
        if family != "ridge":
            raise ValueError("GaussianTest is defined for the squared loss only")
        e = w - self.target
        return float(e @ self._cov(len(w)) @ e + self.noise_var)

    def grad(self, family, w):
        return 2.0 * self._cov(len(w)) @ (w - self.target)

    def hess(self, family, w):
        return 2.0 * self._cov(len(w))

    def to_dict(self):
        return {"kind": "gaussian", "target": np.asarray(self.target).tolist(),
                "cov": None if self.cov is None else np.asarray(self.cov).tolist(),
                "noise_var": self.noise_var}


@dataclass(frozen=True)
class EmpiricalTest:
    """Uniform law on a finite test sample."""
    X: np.ndarray
    y: np.ndarray

    def loss(self, family, w):
        return float(np.mean(_losses(family, w, self.X, self.y)))

    def grad(self, family, w):
        return _grads(family, w, self.X, self.y).mean(axis=0)

    def hess(self, family, w):
        return _hessian(family, w, self.X, self.y, np.full(len(self.y), 1.0 / len(self.y)))

    def to_dict(self):
        return {"kind": "empirical", "X": np.asarray(self.X).tolist(), "y": np.asarray(self.y).tolist()}


def test_from_dict(d):
    if d["kind"] == "gaussian":
        cov = None if d.get("cov") is None else np.asarray(d["cov"], dtype=float)
        return GaussianTest(np.asarray(d["target"], dtype=float), cov, d.get("noise_var", 0.0))
    return EmpiricalTest(np.asarray(d["X"], dtype=float), np.asarray(d["y"], dtype=float))


# -- per-sample losses ----------------------------------------------------------------

def _margin_sigmoid(m):
    # sigma(-m) computed stably
    return 0.5 * (1.0 - np.tanh(0.5 * m))


def _losses(family, w, X, y):
    z = X @ w
    if family == "ridge":
        return (z - y) ** 2
    return np.logaddexp(0.0, -y * z)


def _grads(family, w, X, y):
    z = X @ w
    if family == "ridge":
        return 2.0 * (z - y)[:, None] * X
    return (-y * _margin_sigmoid(y * z))[:, None] * X


def _curvatures(family, w, X, y):
    if family == "ridge":
        return np.full(len(y), 2.0)
    s = _margin_sigmoid(y * (X @ w))
    return s * (1.0 - s)


def _hessian(family, w, X, y, weights):
    c = _curvatures(family, w, X, y) * weights
    return (X * c[:, None]).T @ X


@dataclass(frozen=True)
class ErmInstance:
    family: str
    X: np.ndarray       # (N, d), one sample per row
    y: np.ndarray       # (N,)
    lam: float
    test: object = field(default=None)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
            raise ValueError("need N >= 1 samples with matching labels")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("features and labels must be finite")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    # objective pieces
    def sample_grads(self, w):
        return _grads(self.family, w, self.X, self.y)

    def objective(self, w, weights=None):
        weights = np.ones(self.N) if weights is None else weights
        return float(weights @ _losses(self.family, w, self.X, self.y) + self.lam * w @ w)

    def gradient(self, w, weights=None):
        weights = np.ones(self.N) if weights is None else weights
        return weights @ self.sample_grads(w) + 2.0 * self.lam * w

    def hessian(self, w, weights=None):
        weights = np.ones(self.N) if weights is None else weights
        return _hessian(self.family, w, self.X, self.y, weights) + 2.0 * self.lam * np.eye(self.d)

    def test_loss(self, w):
        return self.test.loss(self.family, w)

    def test_grad(self, w):
        return self.test.grad(self.family, w)

    def test_hess(self, w):
        return self.test.hess(self.family, w)

    def to_dict(self):
        return {"family": self.family, "X": self.X.tolist(), "y": self.y.tolist(), "lam": self.lam,
                "test": None if self.test is None else self.test.to_dict()}

    @classmethod
    def from_dict(cls, d):
        test = None if d.get("test") is None else test_from_dict(d["test"])
        return cls(d["family"], np.asarray(d["X"], dtype=float), np.asarray(d["y"], dtype=float),
                   float(d["lam"]), test)


# -- solvers --------------------------------------------------------------------------

def solve_weighted(inst: ErmInstance, weights, w0=None, tol=1e-12, max_iter=100):
    """Minimiser of ``sum_i weights_i l(w; z_i) + lam ||w||^2``."""
    weights = np.asarray(weights, dtype=float)
    if inst.family == "ridge":
        A = 2.0 * ((inst.X * weights[:, None]).T @ inst.X) + 2.0 * inst.lam * np.eye(inst.d)
        b = 2.0 * inst.X.T @ (weights * inst.y)
        try:
            return solve_spd(A, b)
        except NotSPD as exc:
            raise SolverFailure(f"weighted ridge system not positive definite: {exc}") from None
    w = np.zeros(inst.d) if w0 is None else np.array(w0, dtype=float)
    f = inst.objective(w, weights)
    for _ in range(max_iter):
        g = inst.gradient(w, weights)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol * max(1.0, np.sqrt(inst.N)):
            return w
        try:
            step = solve_spd(inst.hessian(w, weights), g)
        except NotSPD as exc:
            raise SolverFailure(f"Hessian not positive definite: {exc}") from None
        # near the optimum f changes by less than rounding, hence the slack
        slack = 1e-14 * max(1.0, abs(f))
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = inst.objective(w_new, weights)
            if f_new <= f - 1e-4 * t * (g @ step) + slack:
                break
            t *= 0.5
            if t < 1e-10:
                raise SolverFailure("line search failed")
        w, f = w_new, f_new
    if np.linalg.norm(inst.gradient(w, weights)) > 1e-8 * max(1.0, np.sqrt(inst.N)):
        raise SolverFailure("Newton iterations did not converge")
    return w


def fit(inst: ErmInstance):
    return solve_weighted(inst, np.ones(inst.N))


def fit_deleted(inst: ErmInstance, i: int, w0=None):
    if not 0 <= i < inst.N:
        raise IndexError(f"sample index {i} out of range for N={inst.N}")
    weights = np.ones(inst.N)
    weights[i] = 0.0
    return solve_weighted(inst, weights, w0)


def deletion_path(inst: ErmInstance, i: int, t: float, w0=None):
    """Minimiser of ``F_S - t l(.; z_i)``; t = 0 gives ``fit``, t = 1 ``fit_deleted``.

    Values of t slightly outside [0, 1] are accepted for finite differences.
    """
    weights = np.ones(inst.N)
    weights[i] = 1.0 - t
    return solve_weighted(inst, weights, w0)


# -- first order quantities ---------------------------------------------------------------

def path_derivative(inst: ErmInstance, w_hat=None):
    """``w_i'(0) = H_0^{-1} g_i`` for every i, shape (N, d)."""
    w_hat = fit(inst) if w_hat is None else w_hat
    H0 = inst.hessian(w_hat)
    return solve_spd(H0, inst.sample_grads(w_hat).T).T


def descent_alignment(inst: ErmInstance, w_hat=None) -> float:
    """D = grad L(w)^T H_0^{-1} (-(1/lam) sum_i grad l(w; z_i)) at the fitted w."""
    w_hat = fit(inst) if w_hat is None else w_hat
    H0 = inst.hessian(w_hat)
    s = -inst.sample_grads(w_hat).sum(axis=0) / inst.lam
    return float(inst.test_grad(w_hat) @ solve_spd(H0, s))


def expected_first_derivative(inst: ErmInstance, w_hat=None):
    """Returns ``(D, -lam * D / N)``; the latter is the mean path slope E_i[f_i'(0)]."""
    D = descent_alignment(inst, w_hat)
    return D, -inst.lam * D / inst.N


# -- smoothness certificates ---------------------------------------------------------------

@dataclass(frozen=True)
class SmoothnessCertificate:
    G: float
    H: float
    beta: float
    G_R: float
    H_R: float
    beta_R: float
    alpha: float
    radius: float   # ball containing every path iterate

    def to_dict(self):
        return dict(self.__dict__)


def path_radius(inst: ErmInstance) -> float:
    """Radius of a ball that contains ``w_i(t)`` for every i and t in [0, 1]."""
    if inst.family == "ridge":
        M = inst.X.T @ inst.X
        b = inst.X.T @ inst.y
        radius = 0.0
        for i in range(inst.N):
            x = inst.X[i]
            floor = inst.lam + max(sym_eig(M - np.outer(x, x))[0][-1], 0.0)
            # ||b - t x y|| is convex in t, so its max over [0, 1] is at an endpoint
            top = max(np.linalg.norm(b), np.linalg.norm(b - x * inst.y[i]))
            radius = max(radius, top / floor)
        return float(radius)
    # F_{S,t,i}(w) >= lam ||w||^2 and F_{S,t,i}(0) <= N log 2
    return float(np.sqrt(inst.N * np.log(2.0) / inst.lam))


def certificate(inst: ErmInstance) -> SmoothnessCertificate:
    """Assumption constants valid along every deletion path of ``inst``.

    Squared loss: gradient bounds are taken over the ball from
    :func:`path_radius` (the loss has no global gradient bound), Hessian
    Lipschitz constants vanish. Logistic loss: global bounds
    ``|grad| <= |x|``, ``|hess| <= |x|^2/4``, ``beta <= |x|^3/10``.
    The same G and H also bound the test risk's gradient and Hessian.
    """
    X, y = inst.X, inst.y
    norms = np.linalg.norm(X, axis=1)
    B = path_radius(inst)
    test = inst.test
    if inst.family == "ridge":
        G = float(np.max(2.0 * norms * (norms * B + np.abs(y))))
        H = float(2.0 * np.max(norms ** 2))
        beta = 0.0
        if isinstance(test, GaussianTest):
            cov = test._cov(inst.d)
            cnorm = sym_eig(cov)[0][0]
            G = max(G, float(2.0 * cnorm * (B + np.linalg.norm(test.target))))
            H = max(H, float(2.0 * cnorm))
        else:
            tn = np.linalg.norm(test.X, axis=1)
            G = max(G, float(np.max(2.0 * tn * (tn * B + np.abs(test.y)))))
            H = max(H, float(sym_eig(test.hess(inst.family, np.zeros(inst.d)))[0][0]))
        M = X.T @ X
        floor = min(max(sym_eig(M - np.outer(x, x))[0][-1], 0.0) for x in X)
        alpha = 2.0 * (inst.lam + floor)
    else:
        tn = np.linalg.norm(test.X, axis=1) if isinstance(test, EmpiricalTest) else np.zeros(1)
        top = max(norms.max(), tn.max())
        G = float(top)
        H = float(top ** 2 / 4.0)
        beta = float(norms.max() ** 3 / 10.0)
        alpha = 2.0 * inst.lam
    return SmoothnessCertificate(G=G, H=H, beta=beta, G_R=2.0 * B, H_R=2.0, beta_R=0.0,
                                 alpha=alpha, radius=B)


def curvature_bound(inst: ErmInstance, cert: SmoothnessCertificate) -> float:
    """C = 3 H G^2 / alpha^2 + (N beta + lam beta_R) G^3 / alpha^3."""
    beta_sum = inst.N * cert.beta + inst.lam * cert.beta_R
    return 3.0 * cert.H * cert.G ** 2 / cert.alpha ** 2 + beta_sum * cert.G ** 3 / cert.alpha ** 3


# -- exact leave-one-out ---------------------------------------------------------------------

def loo_solutions(inst: ErmInstance, w_hat=None):
    """``w_{-i}`` for every i by exact re-solving, shape (N, d)."""
    w_hat = fit(inst) if w_hat is None else w_hat
    return np.array([fit_deleted(inst, i, w0=w_hat) for i in range(inst.N)])


@dataclass
class DeletionReport:
    test_loss: float
    expected_deleted_loss: float
    D: float
    C: float
    condition: float            # lam * D - C * N / 2
    verdict: bool               # condition guarantees a strict decrease
    N: int
    lam: float
    certificate: dict | None = None

    @property
    def drop(self) -> float:
        """L(w_hat) - E_i[L(w_{-i})]; positive when deletion helps."""
        return self.test_loss - self.expected_deleted_loss

    @property
    def counterexample(self) -> bool:
        return self.verdict and not self.drop > 0

    def to_dict(self):
        out = dict(self.__dict__)
        out.update(drop=self.drop, counterexample=self.counterexample)
        return out


def theorem_check(inst: ErmInstance, cert: SmoothnessCertificate | None = None) -> DeletionReport:
    """Evaluate the beneficial-deletion condition and the exact outcome.

    ``verdict`` is True iff ``lam * D > C * N / 2``; the expected test loss
    after deleting one uniform point is computed by N exact retrainings.
    """
    cert = certificate(inst) if cert is None else cert
    w_hat = fit(inst)
    D = descent_alignment(inst, w_hat)
    C = curvature_bound(inst, cert)
    cond = inst.lam * D - C * inst.N / 2.0
    loo = loo_solutions(inst, w_hat)
    deleted = float(np.mean([inst.test_loss(w) for w in loo]))
    return DeletionReport(
        test_loss=inst.test_loss(w_hat), expected_deleted_loss=deleted, D=D, C=C, condition=cond,
        verdict=bool(cond > 0), N=inst.N, lam=inst.lam, certificate=cert.to_dict(),
    )


# -- finite-difference oracles ----------------------------------------------------------------

def fd_path_derivative(inst: ErmInstance, i: int, h=1e-5, w_hat=None):
    """Central difference of ``w_i(t)`` at t = 0."""
    w_hat = fit(inst) if w_hat is None else w_hat
    return (deletion_path(inst, i, h, w_hat) - deletion_path(inst, i, -h, w_hat)) / (2.0 * h)


def fd_mean_slope(inst: ErmInstance, h=1e-5, w_hat=None) -> float:
    """Average over i of the central-difference slope f_i'(0)."""
    w_hat = fit(inst) if w_hat is None else w_hat
    slopes = [(inst.test_loss(deletion_path(inst, i, h, w_hat)) - inst.test_loss(deletion_path(inst, i, -h, w_hat)))
              / (2.0 * h) for i in range(inst.N)]
    return float(np.mean(slopes))


def fd_curvature_grid(inst: ErmInstance, n_t=11, h=1e-3, indices=None, w_hat=None):
    """Second central differences of f_i(t) = L(w_i(t)) on a grid of t in [h, 1-h].

    Returns an array of shape (len(indices), n_t).
    """
    w_hat = fit(inst) if w_hat is None else w_hat
    indices = range(inst.N) if indices is None else indices
    ts = np.linspace(h, 1.0 - h, n_t)
    out = []
    for i in indices:
        row = []
        for t in ts:
            f = [inst.test_loss(deletion_path(inst, i, t + dt, w_hat)) for dt in (-h, 0.0, h)]
            row.append((f[0] - 2.0 * f[1] + f[2]) / h ** 2)
        out.append(row)
    return np.array(out)


# -- instance generators -------------------------------------------------------------------------

def random_ridge_instance(rng, d=4, N=30, lam=None, shift=1.0, noise=0.5, R=None):
    """Ridge instance whose test target is shifted away from the training one."""
    X = rng.standard_normal((N, d))
    if R is not None:
        X *= R / np.linalg.norm(X, axis=1, keepdims=True)
    w_train = rng.standard_normal(d)
    y = X @ w_train + noise * rng.standard_normal(N)
    target = w_train + shift * rng.standard_normal(d)
    lam = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0)))) if lam is None else lam
    return ErmInstance("ridge", X, y, lam, GaussianTest(target))


def random_logistic_instance(rng, d=3, N=25, lam=None, n_test=40, shift=1.0):
    """Logistic instance with a test sample drawn around a shifted separator."""
    w_true = rng.standard_normal(d)
    X = rng.standard_normal((N, d))
    y = np.where(X @ w_true + 0.5 * rng.standard_normal(N) > 0, 1.0, -1.0)
    w_test = w_true + shift * rng.standard_normal(d)
    Xt = rng.standard_normal((n_test, d)) + 0.3 * shift
    yt = np.where(Xt @ w_test > 0, 1.0, -1.0)
    lam = float(np.exp(rng.uniform(np.log(0.1), np.log(5.0)))) if lam is None else lam
    return ErmInstance("logistic", X, y, lam, EmpiricalTest(Xt, yt))


def coherent_shift_instance(rng, d=3, N=5, lam=5.0, scale=0.1, family="ridge"):
    """Small, mutually agreeing training set whose test law disagrees with it.

    Strong regularisation with small features makes ``lam * D`` dominate
    ``C * N / 2``, so the beneficial-deletion condition actually fires.
    """
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    X = scale * (direction + 0.1 * rng.standard_normal((N, d)))
    y = np.ones(N)
    if family == "ridge":
        return ErmInstance("ridge", X, y, lam, GaussianTest(np.zeros(d)))
    # test labels contradict the training labels on the same inputs
    Xt = np.vstack([X, -X])
    yt = np.concatenate([-np.ones(N), np.ones(N)])
    return ErmInstance("logistic", X, y, lam, EmpiricalTest(Xt, yt))


def load_instances(path):
    with open(path) as fh:
        return [ErmInstance.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- extra training class experiment ---------------------------------------------------------------

@dataclass(frozen=True)
class ExtraClassConfig:
    train_sizes: tuple = (60, 40, 40)     # class 2 never appears at test time
    test_sizes: tuple = (600, 400)
    centers: tuple = ((-1.0, 0.0), (1.0, 0.0), (0.0, 1.0))
    spread: float = 1.0
    delete_fraction: float = 0.05
    lams: tuple = tuple(float(v) for v in np.logspace(-3, 4, 15))
    seeds: tuple = tuple(range(20))


def _softmax_fit(X, y, k, lam, w0=None):
    """L2-regularised multinomial logistic regression with a free intercept."""
    from scipy.optimize import minimize

    n, d = X.shape
    Y = np.eye(k)[y]

    def objective(theta):
        W = theta[: d * k].reshape(d, k)
        b = theta[d * k:]
        Z = X @ W + b
        Z -= Z.max(axis=1, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        P = np.exp(logp)
        f = -np.sum(Y * logp) + lam * np.sum(W * W)
        gW = X.T @ (P - Y) + 2.0 * lam * W
        gb = (P - Y).sum(axis=0)
        return f, np.concatenate([gW.ravel(), gb])

    theta0 = np.zeros(d * k + k) if w0 is None else w0
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-9, "ftol": 1e-15, "maxiter": 5000})
    return res.x


def _softmax_predict(theta, X, k):
    d = X.shape[1]
    W = theta[: d * k].reshape(d, k)
    return np.argmax(X @ W + theta[d * k:], axis=1)


def _blobs(rng, sizes, centers, spread):
    X = np.vstack([np.asarray(c) + spread * rng.standard_normal((n, len(c))) for n, c in zip(sizes, centers)])
    y = np.concatenate([np.full(n, j) for j, n in enumerate(sizes)])
    return X, y


def extra_class_experiment(cfg: ExtraClassConfig = ExtraClassConfig(), make_rng=None):
    """Test accuracy with and without deleting a random fraction of the training set.

    Returns ``(rows, summary, majority)``: one row per (lam, seed), one summary
    entry per lam with mean accuracies across seeds, and the majority-class
    test rate.
    """
    from .numerics import make_rng as _make_rng
    make_rng = _make_rng if make_rng is None else make_rng
    k = len(cfg.train_sizes)
    rows = []
    for seed in cfg.seeds:
        rng = make_rng(seed)
        Xtr, ytr = _blobs(rng, cfg.train_sizes, cfg.centers, cfg.spread)
        Xte, yte = _blobs(rng, cfg.test_sizes, cfg.centers[: len(cfg.test_sizes)], cfg.spread)
        n = len(ytr)
        n_del = int(round(cfg.delete_fraction * n))
        keep = np.sort(rng.permutation(n)[n_del:])
        for lam in cfg.lams:
            full = _softmax_fit(Xtr, ytr, k, lam)
            part = _softmax_fit(Xtr[keep], ytr[keep], k, lam, w0=full)
            rows.append({
                "lam": lam, "seed": seed,
                "acc_full": float(np.mean(_softmax_predict(full, Xte, k) == yte)),
                "acc_deleted": float(np.mean(_softmax_predict(part, Xte, k) == yte)),
            })
    summary = []
    for lam in cfg.lams:
        sel = [r for r in rows if r["lam"] == lam]
        full = float(np.mean([r["acc_full"] for r in sel]))
        part = float(np.mean([r["acc_deleted"] for r in sel]))
        summary.append({"lam": lam, "acc_full": full, "acc_deleted": part, "improved": part > full})
    majority = max(cfg.test_sizes) / sum(cfg.test_sizes)
    return rows, summary, majority
