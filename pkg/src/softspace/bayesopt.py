"""Gaussian-process Bayesian optimization over Gr(M, C) with a trajectory-length fidelity.

Inputs are pairs (B, T): an orthonormal M x C basis and a horizon length.
The kernel is separable, a squared exponential in the projector distance
times a squared exponential in T, so it only sees B through ``B B^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from . import grassmann as gr


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelParams:
    signal_var: float = 1.0
    length_B: float = 0.5
    length_T: float = 100.0
    noise_var: float = 1e-4

    def __post_init__(self):
        for name in ("signal_var", "length_B", "length_T", "noise_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    def to_log(self) -> np.ndarray:
        return np.log([self.signal_var, self.length_B, self.length_T, self.noise_var])

    @classmethod
    def from_log(cls, x) -> "KernelParams":
        return cls(*map(float, np.exp(x)))

    def to_dict(self) -> dict:
        return dict(signal_var=self.signal_var, length_B=self.length_B,
                    length_T=self.length_T, noise_var=self.noise_var)


def _stack(Bs) -> np.ndarray:
    arr = np.asarray(Bs, float)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def kernel(Bi, Ti, Bj, Tj, theta: KernelParams) -> float:
    d2 = gr.distance(Bi, Bj) ** 2
    dT = float(Ti) - float(Tj)
    return float(theta.signal_var * math.exp(-d2 / (2 * theta.length_B**2)
                                            - dT * dT / (2 * theta.length_T**2)))


def _parts(D2: np.ndarray, dT2: np.ndarray, theta: KernelParams) -> np.ndarray:
    return theta.signal_var * np.exp(-D2 / (2 * theta.length_B**2) - dT2 / (2 * theta.length_T**2))


def gram(Bs, Ts, theta: KernelParams) -> np.ndarray:
    """Noise-free kernel matrix of a point set."""
    Bs = _stack(Bs)
    Ts = np.asarray(Ts, float)
    D2 = gr.pairwise_sq_distances(Bs)
    return _parts(D2, (Ts[:, None] - Ts[None, :]) ** 2, theta)


@dataclass(frozen=True, eq=False)
class GPModel:
    """Fitted GP posterior.  Immutable; prediction is read-only."""

    Bs: np.ndarray  # (n, M, C)
    Ts: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    params: KernelParams
    chol: np.ndarray  # lower Cholesky factor of K + (noise + jitter) I
    alpha: np.ndarray  # (K + s I)^-1 (y - mean)
    mean: float
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.Bs.shape[1], self.Bs.shape[2]

    def cross(self, B: np.ndarray, T: float) -> np.ndarray:
        d2 = gr.sq_distances(B, self.Bs)
        return _parts(d2, (self.Ts - float(T)) ** 2, self.params)

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.mean
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * self.n * np.log(2 * np.pi))


def gp_fit(Bs, Ts, y, theta: KernelParams, *, max_jitter: float = 1e-4) -> GPModel:
    """Condition a constant-mean GP on the data.

    A jitter starting at 1e-10 (relative to the signal variance) is added
    and grown by 10x until the Cholesky factorization succeeds.
    """
    Bs = _stack(Bs)
    Ts = np.asarray(Ts, float).reshape(-1)
    y = np.asarray(y, float).reshape(-1)
    if len(y) == 0:
        raise GPError("cannot fit a GP to an empty dataset")
    if not (len(Bs) == len(Ts) == len(y)):
        raise ValueError(f"inconsistent data sizes: {len(Bs)}, {len(Ts)}, {len(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    K = gram(Bs, Ts, theta)
    mean = float(y.mean())
    jitter = 0.0
    step = 1e-10
    while True:
        A = K + (theta.noise_var + jitter * theta.signal_var) * np.eye(len(y))
        try:
            L = np.linalg.cholesky(A)
            break
        except np.linalg.LinAlgError:
            if step > max_jitter:
                raise GPError(f"Cholesky failed even with jitter {jitter:g}") from None
            jitter = step
            step *= 10.0
    alpha = cho_solve((L, True), y - mean)
    return GPModel(Bs=Bs, Ts=Ts, y=y, params=theta, chol=L, alpha=alpha, mean=mean, jitter=jitter)


def gp_predict(gp: GPModel, B: np.ndarray, T: float) -> tuple[float, float]:
    """Posterior mean and standard deviation of the latent function at (B, T)."""
    k = gp.cross(np.asarray(B, float), T)
    mu = gp.mean + k @ gp.alpha
    v = solve_triangular(gp.chol, k, lower=True)
    var = gp.params.signal_var - v @ v
    return float(mu), float(np.sqrt(max(var, 0.0)))


def _predict_grad(gp: GPModel, B: np.ndarray, T: float):
    """(mu, sigma, dmu/dB, dsigma/dB) using the analytic kernel gradient."""
    k = gp.cross(B, T)
    mu = gp.mean + k @ gp.alpha
    w = cho_solve((gp.chol, True), k)
    var = gp.params.signal_var - k @ w
    sigma = math.sqrt(max(var, 0.0))
    # dk_i/dB = (2 k_i / l^2) B_i B_i^T B
    BtB = np.einsum("nmc,md->ncd", gp.Bs, B)
    P = np.einsum("nmc,ncd->nmd", gp.Bs, BtB)
    scale = 2.0 / gp.params.length_B**2
    dmu = scale * np.einsum("n,nmd->md", k * gp.alpha, P)
    if sigma > 1e-12:
        dvar = -2.0 * scale * np.einsum("n,nmd->md", k * w, P)
        dsig = dvar / (2.0 * sigma)
    else:
        dsig = np.zeros_like(B)
    return float(mu), sigma, dmu, dsig


def beta_schedule(i: int) -> float:
    """GP-UCB exploration weight ``2 log(i^2 pi^2 / 0.6)`` for iteration i >= 1."""
    i = max(int(i), 1)
    return float(2.0 * np.log(i * i * np.pi**2 / 0.6))


def ucb(gp: GPModel, B: np.ndarray, T_eval: float, beta: float) -> float:
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    mu, sigma = gp_predict(gp, B, T_eval)
    return mu + math.sqrt(beta) * sigma


# ------------------------------------------------------------------ hyperparameters


@dataclass(frozen=True)
class HyperBounds:
    """Search box for kernel parameters.

    Variance bounds are relative to the target variance so the fit is
    equivariant under rescaling of the targets; ``length_T`` bounds are
    relative to the largest fidelity.
    """

    signal_var: tuple[float, float] = (1e-4, 1e2)
    length_B: tuple[float, float] = (0.05, 5.0)
    length_T: tuple[float, float] = (0.05, 10.0)
    noise_var: tuple[float, float] = (1e-8, 1.0)


def _target_scale(y: np.ndarray) -> float:
    v = float(np.var(y))
    return v if v > 0 else max(float(np.mean(y)) ** 2, 1.0)


def median_heuristic(Bs, Ts, y) -> KernelParams:
    Bs = _stack(Bs)
    Ts = np.asarray(Ts, float)
    s = _target_scale(np.asarray(y, float))
    D = np.sqrt(gr.pairwise_sq_distances(Bs))
    off = D[np.triu_indices(len(Bs), 1)]
    off = off[off > 0]
    lB = float(np.median(off)) if len(off) else 1.0
    span = float(Ts.max() - Ts.min())
    lT = 0.5 * span if span > 0 else max(float(Ts.max()), 1.0)
    return KernelParams(s, lB, lT, 1e-4 * s)


def _neg_lml(x, D2, dT2, r):
    sf2, lB, lT, sn2 = np.exp(x)
    n = len(r)
    E = np.exp(-D2 / (2 * lB * lB) - dT2 / (2 * lT * lT))
    Kf = sf2 * E
    A = Kf + sn2 * np.eye(n)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros(4)
    a = cho_solve((L, True), r)
    nll = 0.5 * r @ a + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2 * np.pi)
    W = np.outer(a, a) - cho_solve((L, True), np.eye(n))
    dK = (Kf, Kf * D2 / (lB * lB), Kf * dT2 / (lT * lT), sn2 * np.eye(n))
    grad = np.array([-0.5 * np.sum(W * d) for d in dK])
    return float(nll), grad


def gp_hyperopt(Bs, Ts, y, bounds: HyperBounds | None = None, *, restarts: int = 4,
                seed: int = 0) -> KernelParams:
    """Maximize the log marginal likelihood over log-parameters with L-BFGS-B.

    Starts from the median heuristic plus ``restarts`` random points in the
    box.  Falls back to the median heuristic when every start fails.
    """
    Bs = _stack(Bs)
    Ts = np.asarray(Ts, float).reshape(-1)
    y = np.asarray(y, float).reshape(-1)
    if len(y) < 3:
        raise ValueError(f"hyperparameter fitting needs at least 3 records, got {len(y)}")
    bounds = bounds or HyperBounds()
    s = _target_scale(y)
    t_scale = max(float(np.abs(Ts).max()), 1.0)
    box = np.log([
        (bounds.signal_var[0] * s, bounds.signal_var[1] * s),
        bounds.length_B,
        (bounds.length_T[0] * t_scale, bounds.length_T[1] * t_scale),
        (bounds.noise_var[0] * s, bounds.noise_var[1] * s),
    ])
    fallback = median_heuristic(Bs, Ts, y)
    D2 = gr.pairwise_sq_distances(Bs)
    dT2 = (Ts[:, None] - Ts[None, :]) ** 2
    r = y - y.mean()
    rng = np.random.default_rng(seed)
    starts = [np.clip(fallback.to_log(), box[:, 0], box[:, 1])]
    starts += [rng.uniform(box[:, 0], box[:, 1]) for _ in range(restarts)]
    best_x, best_f = None, np.inf
    for x0 in starts:
        try:
            res = minimize(_neg_lml, x0, args=(D2, dT2, r), jac=True, method="L-BFGS-B",
                           bounds=box, options=dict(maxiter=200))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < best_f and res.fun < 1e24:
            best_x, best_f = res.x, res.fun
    if best_x is None:
        return fallback
    return KernelParams.from_log(best_x)


# ------------------------------------------------------------------ acquisition


@dataclass
class AscentTrace:
    """Acquisition values along one ascent run (for diagnostics and tests)."""

    values: list[float] = field(default_factory=list)
    points: list[np.ndarray] = field(default_factory=list)


def _ascend(gp, B, T_eval, sb, max_iter, grad_tol, trace: AscentTrace | None):
    def value_grad(X):
        mu, sig, dmu, dsig = _predict_grad(gp, X, T_eval)
        return mu + sb * sig, dmu + sb * dsig

    f, G = value_grad(B)
    step = 1.0
    if trace is not None:
        trace.values.append(f)
        trace.points.append(B)
    for _ in range(max_iter):
        xi = gr.tangent_project(B, G)
        gn2 = float(np.sum(xi * xi))
        if math.sqrt(gn2) <= grad_tol:
            break
        t = step
        for _ in range(40):
            Bn = gr.retract(B, t * xi)
            fn = ucb_value(gp, Bn, T_eval, sb)
            if fn >= f + 1e-4 * t * gn2:
                break
            t *= 0.5
        else:
            break
        B = Bn
        f, G = value_grad(B)
        step = 2.0 * t
        if trace is not None:
            trace.values.append(f)
            trace.points.append(B)
    return B, f


def ucb_value(gp, B, T_eval, sqrt_beta):
    mu, sigma = gp_predict(gp, B, T_eval)
    return mu + sqrt_beta * sigma


def maximize_acquisition(gp: GPModel, beta: float, M: int, C: int, rng: np.random.Generator, *,
                         T_eval: float, n_random: int = 8, n_incumbent: int = 2,
                         perturbation: float = 0.1, max_iter: int = 100, grad_tol: float = 1e-6,
                         traces: list | None = None) -> np.ndarray:
    """Multi-start Riemannian gradient ascent of the UCB on Gr(M, C).

    Starts: ``n_random`` uniform points and ``n_incumbent`` small
    perturbations of the best observed basis.  Returns the best point found.
    """
    if gp.shape != (M, C):
        raise ValueError(f"GP was fit on Gr{gp.shape}, asked to search Gr({M}, {C})")
    sb = math.sqrt(max(beta, 0.0))
    starts = [gr.random_grassmann(M, C, rng) for _ in range(n_random)]
    if gp.n:
        inc = gp.Bs[int(np.argmax(gp.y))]
        for _ in range(n_incumbent):
            xi = gr.tangent_project(inc, rng.standard_normal((M, C)))
            xi *= perturbation / max(np.linalg.norm(xi), 1e-300)
            starts.append(gr.retract(inc, xi))
    best_B, best_f = None, -np.inf
    for B0 in starts:
        trace = AscentTrace() if traces is not None else None
        B, f = _ascend(gp, B0, T_eval, sb, max_iter, grad_tol, trace)
        if traces is not None:
            traces.append(trace)
        if f > best_f:
            best_B, best_f = B, f
    return best_B


# ------------------------------------------------------------------ fidelity


def fidelity_ladder(T_max: int, rungs: int = 4) -> list[int]:
    """Geometric set ``{T_max/2^(rungs-1), ..., T_max/2, T_max}`` rounded to whole steps."""
    if T_max < 1:
        raise ValueError(f"T_max must be >= 1, got {T_max}")
    vals = {max(1, int(round(T_max / 2**k))) for k in range(rungs)}
    return sorted(vals)


def boca_select_fidelity(gp: GPModel | None, B_next: np.ndarray, ladder, q_T: float,
                         T_max: int, *, noise_floor: bool = True) -> int:
    """Smallest rung whose posterior std at B_next exceeds ``q_T * sigma_f * T / T_max``.

    With ``noise_floor`` the std must also exceed the observation noise
    std: a cheap evaluation cannot be informative below that level.
    """
    ladder = sorted(int(t) for t in ladder)
    if gp is None or gp.n == 0:
        return ladder[0]
    sf = math.sqrt(gp.params.signal_var)
    floor = math.sqrt(gp.params.noise_var) if noise_floor else 0.0
    for T in ladder:
        if T >= T_max:
            break
        sigma = gp_predict(gp, B_next, T)[1]
        if sigma > q_T * sf * T / T_max and sigma > floor:
            return T
    return int(T_max)
