"""Closed forms for ridge regression with shifted test labels.

Training data ``y = X w_star + noise`` with ``noise ~ N(0, sigma2 I)`` and
every row of X on the sphere of radius R; the test law has ``E[x x^T] = I``
and noiseless labels, so ``L(w) = ||w - w_star||^2``.

The closed-form D and C are averages over the label noise. Helpers here
compute the same averages exactly (every quantity is quadratic in y), so
they can be checked against the generic ERM code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .erm import ErmInstance, GaussianTest, descent_alignment
from .numerics import solve_spd, sym_eig


class EmptyWindow(ValueError):
    pass


class ZeroNoise(ValueError):
    pass


@dataclass(frozen=True)
class RidgeInstance:
    X: np.ndarray       # (N, d)
    y: np.ndarray
    w_star: np.ndarray
    sigma2: float
    lam: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        object.__setattr__(self, "w_star", np.asarray(self.w_star, dtype=float).ravel())
        if X.shape[0] != self.y.shape[0] or X.shape[1] != self.w_star.shape[0]:
            raise ValueError("inconsistent shapes")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.sigma2 < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def R(self):
        return float(np.max(np.linalg.norm(self.X, axis=1)))

    @property
    def M(self):
        return self.X.T @ self.X

    def spectrum(self):
        """Eigenvalues of M (descending) and the coordinates of w_star in that basis."""
        mu, U = sym_eig(self.M)
        return np.maximum(mu, 0.0), U.T @ self.w_star

    @property
    def clean_labels(self):
        return self.X @ self.w_star

    def to_erm(self, y=None):
        return ErmInstance("ridge", self.X, self.y if y is None else y, self.lam, GaussianTest(self.w_star))

    def to_dict(self):
        return {"X": self.X.tolist(), "y": self.y.tolist(), "w_star": self.w_star.tolist(),
                "sigma2": self.sigma2, "lam": self.lam}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["X"]), np.asarray(d["y"]), np.asarray(d["w_star"]),
                   float(d["sigma2"]), float(d["lam"]))


def snr(inst: RidgeInstance) -> float:
    if inst.sigma2 == 0:
        raise ZeroNoise("signal-to-noise ratio undefined for noiseless labels")
    return inst.R ** 2 * float(inst.w_star @ inst.w_star) / inst.sigma2


def closed_form_D(inst: RidgeInstance) -> float:
    """D = 2 sum_j mu_j / (mu_j + lam)^3 (sigma2 - lam w~_j^2)."""
    mu, wt = inst.spectrum()
    return float(2.0 * np.sum(mu / (mu + inst.lam) ** 3 * (inst.sigma2 - inst.lam * wt ** 2)))


def closed_form_C(inst: RidgeInstance) -> float:
    R, lam, s2 = inst.R, inst.lam, inst.sigma2
    w2 = float(inst.w_star @ inst.w_star)
    return 2.0 * (3 * R ** 4 * w2 / lam ** 2
                  + s2 * (R ** 2 / lam ** 2 + 19 / 4 * R ** 4 / lam ** 3 + 3 / 4 * R ** 6 / lam ** 4))


# -- corollary --------------------------------------------------------------------------------

@dataclass(frozen=True)
class CorollaryParams:
    k1: float = 0.05
    k2: float = 0.1
    k3: float = 0.05

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3) <= 0:
            raise ValueError("k1, k2, k3 must be positive")
        if self.E4 <= 0:
            raise ValueError(f"constants give a non-positive SNR budget (E4 = {self.E4:.4g})")

    @property
    def E4(self):
        return 2 * (1 - self.k3) / (1 + self.k1) ** 3 - (1 + 2 * self.k2)

    @property
    def snr_limit(self):
        return self.E4 / 3


@dataclass
class CorollaryVerdict:
    passes: bool
    snr: float
    snr_ok: bool
    lam_ratio: float          # lam / R^2
    lower: float              # window on lam / R^2
    upper: float
    empty_window: bool
    in_window: bool
    binding_lower: str        # which lower bound is active
    coordinate_upper: float   # per-coordinate form of the upper bound
    binding_upper: str

    def to_dict(self):
        return dict(self.__dict__)


def lambda_window(inst: RidgeInstance, params: CorollaryParams = CorollaryParams()):
    """Admissible range for lam / R^2 and the name of the active lower bound."""
    mu, _ = inst.spectrum()
    R2 = inst.R ** 2
    lows = {"spectrum": mu[0] / (params.k1 * R2), "k2": 19 / (4 * params.k2),
            "sqrt_k2": float(np.sqrt(3 / (4 * params.k2)))}
    name = max(lows, key=lows.get)
    return lows[name], params.k3 / snr(inst), name


def corollary_check(inst: RidgeInstance, params: CorollaryParams = CorollaryParams()) -> CorollaryVerdict:
    s = snr(inst)
    lower, upper, name = lambda_window(inst, params)
    ratio = inst.lam / inst.R ** 2
    _, wt = inst.spectrum()
    big = np.max(wt ** 2)
    coord = np.inf if big == 0 else params.k3 * inst.sigma2 / big / inst.R ** 2
    in_window = bool(lower < ratio < upper)
    snr_ok = bool(s < params.snr_limit)
    return CorollaryVerdict(
        passes=in_window and snr_ok, snr=s, snr_ok=snr_ok, lam_ratio=ratio, lower=lower, upper=upper,
        empty_window=bool(lower >= upper), in_window=in_window, binding_lower=name,
        coordinate_upper=float(coord), binding_upper="norm" if upper <= coord else "coordinate",
    )


def bound_chain(inst: RidgeInstance, params: CorollaryParams = CorollaryParams()):
    """The intermediate bounds D >= D' and C <= C' behind the window condition."""
    R, lam, s2, N = inst.R, inst.lam, inst.sigma2, inst.N
    w2 = float(inst.w_star @ inst.w_star)
    trace = float(np.trace(inst.M))
    D_low = 2 * s2 * trace * (1 - params.k3) / ((1 + params.k1) ** 3 * lam ** 3)
    C_up = 2 * R ** 2 / lam ** 2 * (3 * R ** 2 * w2 + s2 * (1 + 2 * params.k2))
    return {"D": closed_form_D(inst), "D_lower": D_low, "C": closed_form_C(inst), "C_upper": C_up,
            "margin_lower": lam * D_low - C_up * N / 2}


# -- generation ----------------------------------------------------------------------------------

def sphere_points(rng, n, d, R):
    x = rng.standard_normal((n, d))
    return R * x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_instance(rng, d=5, N=50, R=1.0, target_snr=1e-5, placement=0.5,
                      params: CorollaryParams = CorollaryParams(), sigma2=1.0):
    """Sample an instance with the requested SNR and lam placed inside the window.

    ``placement`` in (0, 1) interpolates geometrically between the window
    ends; the endpoints themselves are excluded by the strict inequalities.
    Raises EmptyWindow when no admissible lam exists for the sampled data.
    """
    if sigma2 <= 0:
        raise ZeroNoise("noise variance must be positive")
    X = sphere_points(rng, N, d, R)
    w = rng.standard_normal(d)
    w *= np.sqrt(target_snr * sigma2) / (R * np.linalg.norm(w))
    y = X @ w + np.sqrt(sigma2) * rng.standard_normal(N)
    probe = RidgeInstance(X, y, w, sigma2, 1.0)
    lower, upper, _ = lambda_window(probe, params)
    if lower >= upper:
        raise EmptyWindow(f"lam/R^2 window ({lower:.4g}, {upper:.4g}) is empty at SNR {target_snr:g}")
    ratio = lower ** (1 - placement) * upper ** placement
    return RidgeInstance(X, y, w, sigma2, ratio * probe.R ** 2)


# -- exact noise averages --------------------------------------------------------------------------

def noise_average(q, y0, sigma):
    """E[q(y0 + sigma * n)] for n ~ N(0, I) and q a quadratic in y; exact."""
    base = q(y0)
    total = base
    for k in range(len(y0)):
        e = np.zeros(len(y0))
        e[k] = sigma
        total += 0.5 * (q(y0 + e) + q(y0 - e) - 2.0 * base)
    return total


def averaged_D(inst: RidgeInstance) -> float:
    """Label-noise average of the generic D, through the ERM code path."""
    return noise_average(lambda y: descent_alignment(inst.to_erm(y)), inst.clean_labels, np.sqrt(inst.sigma2))


def _loo_systems(inst: RidgeInstance):
    """(M_i + lam I)^{-1} for every i by Sherman-Morrison downdates, shape (N, d, d)."""
    A_inv = solve_spd(inst.M + inst.lam * np.eye(inst.d), np.eye(inst.d))
    v = inst.X @ A_inv                                  # rows A^{-1} x_i
    h = np.einsum("ij,ij->i", v, inst.X)                 # leverages x_i^T A^{-1} x_i
    return A_inv[None] + np.einsum("ni,nj->nij", v, v) / (1.0 - h)[:, None, None], A_inv


def loo_fits(inst: RidgeInstance, y=None):
    """Exact w_hat and every w_{-i} for labels y (defaults to the instance's)."""
    y = inst.y if y is None else y
    A_i, A_inv = _loo_systems(inst)
    b = inst.X.T @ y
    b_i = b[None] - inst.X * y[:, None]
    return A_inv @ b, np.einsum("nij,nj->ni", A_i, b_i)


def realized_drop(inst: RidgeInstance) -> float:
    """L(w_hat) - E_i L(w_{-i}) for the sampled labels."""
    w, loo = loo_fits(inst)
    full = float(np.sum((w - inst.w_star) ** 2))
    return full - float(np.mean(np.sum((loo - inst.w_star) ** 2, axis=1)))


def expected_losses(inst: RidgeInstance):
    """Noise-averaged test loss before and after deleting one uniform point."""
    A_i, A_inv = _loo_systems(inst)
    M, w, s2 = inst.M, inst.w_star, inst.sigma2
    full = float(np.sum((A_inv @ M @ w - w) ** 2) + s2 * np.trace(A_inv @ M @ A_inv))
    M_i = M[None] - np.einsum("ni,nj->nij", inst.X, inst.X)
    mean_i = np.einsum("nij,njk,k->ni", A_i, M_i, w) - w
    var_i = np.einsum("nij,njk,nki->n", A_i, M_i, A_i)
    deleted = float(np.mean(np.sum(mean_i ** 2, axis=1) + s2 * var_i))
    return full, deleted


def expected_drop(inst: RidgeInstance) -> float:
    full, deleted = expected_losses(inst)
    return full - deleted


def corollary_row(inst: RidgeInstance, params: CorollaryParams = CorollaryParams()):
    v = corollary_check(inst, params)
    D, C = closed_form_D(inst), closed_form_C(inst)
    return {
        "d": inst.d, "N": inst.N, "R": inst.R, "SNR": v.snr, "lam": inst.lam, "D": D, "C": C,
        "margin": inst.lam * D - C * inst.N / 2, "expected_drop": expected_drop(inst),
        "realized_drop": realized_drop(inst), "pass": v.passes,
    }


def corollary_sweep(rng, n=500, d=5, N=50, R=1.0, snr_range=(1e-6, 5e-5), placement_range=(0.05, 0.95),
                    params: CorollaryParams = CorollaryParams()):
    """Rows for ``n`` generated instances with log-uniform SNR and placement."""
    rows = []
    skipped = 0
    while len(rows) < n:
        s = float(np.exp(rng.uniform(*np.log(snr_range))))
        p = float(rng.uniform(*placement_range))
        try:
            inst = generate_instance(rng, d, N, R, s, p, params)
        except EmptyWindow:
            skipped += 1
            if skipped > 10 * n:
                raise
            continue
        rows.append(corollary_row(inst, params))
    return rows


# -- matched train and test laws --------------------------------------------------------------------

def matched_instance(rng, d=5, N=1000, R=1.0, snr_value=1.0, lam=1.0, sigma2=1.0):
    """Ridge ERM instance whose test law is the training law itself.

    Rows lie on the radius-R sphere, so ``E[x x^T] = (R^2/d) I`` and the test
    risk carries the label noise.
    """
    X = sphere_points(rng, N, d, R)
    w = rng.standard_normal(d)
    w *= np.sqrt(snr_value * sigma2) / (R * np.linalg.norm(w))
    y = X @ w + np.sqrt(sigma2) * rng.standard_normal(N)
    test = GaussianTest(w, cov=(R ** 2 / d) * np.eye(d), noise_var=sigma2)
    return ErmInstance("ridge", X, y, lam, test)


def oracle_ridge_lambda(d, snr_value, R=1.0):
    """Risk-minimising lam for isotropic rows: d sigma^2 / ||w_star||^2 (scaled by R^2)."""
    return d * R ** 2 / snr_value


def matched_control(rng, n=200, d=5, N=1000, R=1.0, lam_range=(1e-2, 1e2), snr_range=(0.1, 10.0)):
    """D for ridge instances with matched laws; lam / R^2 and SNR are log-uniform.

    Returns rows with the realized D, lam, SNR and the oracle lam.
    """
    rows = []
    for _ in range(n):
        lam = R ** 2 * float(np.exp(rng.uniform(*np.log(lam_range))))
        s = float(np.exp(rng.uniform(*np.log(snr_range))))
        inst = matched_instance(rng, d, N, R, s, lam)
        rows.append({"lam": lam, "SNR": s, "oracle_lam": oracle_ridge_lambda(d, s, R),
                     "D": descent_alignment(inst)})
    return rows


def matched_averaged_D(inst: ErmInstance, sigma2=1.0) -> float:
    """Label-noise average of D for an instance from :func:`matched_instance`."""
    y0 = inst.X @ inst.test.target
    return noise_average(lambda y: descent_alignment(ErmInstance("ridge", inst.X, y, inst.lam, inst.test)),
                         y0, np.sqrt(sigma2))


# -- noise-averaged deletion path ------------------------------------------------------------------

def averaged_path_loss(inst: RidgeInstance, i: int, t: float) -> float:
    """E_noise ||w_i(t) - w_star||^2, exact (w_i(t) is linear in the labels)."""
    weights = np.ones(inst.N)
    weights[i] = 1.0 - t
    A = (inst.X * weights[:, None]).T @ inst.X + inst.lam * np.eye(inst.d)
    P = solve_spd(A, inst.X.T * weights)               # w_i(t) = P y
    mean = P @ inst.clean_labels - inst.w_star
    return float(mean @ mean + inst.sigma2 * np.sum(P * P))


def averaged_curvature_grid(inst: RidgeInstance, n_t=11, h=1e-3, indices=None):
    """Second central differences of the noise-averaged path loss, shape (len(indices), n_t)."""
    indices = range(inst.N) if indices is None else indices
    ts = np.linspace(h, 1.0 - h, n_t)
    return np.array([[(averaged_path_loss(inst, i, t - h) - 2 * averaged_path_loss(inst, i, t)
                       + averaged_path_loss(inst, i, t + h)) / h ** 2 for t in ts] for i in indices])


def averaged_theorem_check(inst: RidgeInstance):
    """Deletion report built from the closed forms and exact noise averages.

    Verdict is ``lam * D > C * N / 2`` with the closed-form D and C; the losses
    are label-noise expectations before and after deleting one uniform point.
    """
    from .erm import DeletionReport

    D, C = closed_form_D(inst), closed_form_C(inst)
    full, deleted = expected_losses(inst)
    cond = inst.lam * D - C * inst.N / 2
    return DeletionReport(test_loss=full, expected_deleted_loss=deleted, D=D, C=C, condition=cond,
                          verdict=bool(cond > 0), N=inst.N, lam=inst.lam)
