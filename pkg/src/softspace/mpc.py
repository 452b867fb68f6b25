"""Receding-horizon control in a C-dimensional control space.

Per-step control forces are a spline ``F_c = S F~_c`` of K control points, so
both optimizers (MPPI and Gauss-Newton shooting) work on K*C numbers no
matter how large the simulation space is.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import comb

from .dynamics import (
    Environment,
    ReducedState,
    SimCounter,
    Task,
    Trajectory,
    simulate,
    state_weight_matrix,
)
from .rom import ReducedModel


class ControllerError(RuntimeError):
    pass


# ------------------------------------------------------------------ splines


def spline_weights(H: int, K: int, kind: str = "bezier") -> np.ndarray:
    """(H, K) interpolation weights; row n gives step n's mix of control points."""
    if not (H >= K >= 1):
        raise ValueError(f"need H >= K >= 1, got H={H}, K={K}")
    u = np.zeros(1) if H == 1 else np.arange(H) / (H - 1)
    if kind == "bezier":
        k = np.arange(K)
        return comb(K - 1, k)[None, :] * u[:, None] ** k[None, :] * (1 - u[:, None]) ** (K - 1 - k)[None, :]
    if kind == "bspline":
        p = min(K - 1, 3)
        inner = np.linspace(0, 1, K - p + 1)
        knots = np.concatenate([np.zeros(p), inner, np.ones(p)])
        return BSpline.design_matrix(u, knots, p).toarray()
    raise ValueError(f"unknown spline kind {kind!r}")


def spline_matrix(H: int, K: int, C: int, kind: str = "bezier") -> np.ndarray:
    """S in R^{HC x KC}: flattened step-major controls = S @ flattened control points."""
    return np.kron(spline_weights(H, K, kind), np.eye(C))


@dataclass(frozen=True)
class ControlSpline:
    points: np.ndarray  # (K, C)
    weights: np.ndarray  # (H, K)

    @classmethod
    def zeros(cls, H: int, K: int, C: int, kind: str = "bezier") -> "ControlSpline":
        return cls(np.zeros((K, C)), spline_weights(H, K, kind))

    @property
    def H(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    @property
    def C(self) -> int:
        return self.points.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return np.kron(self.weights, np.eye(self.C))

    def controls(self) -> np.ndarray:
        return self.weights @ self.points

    def with_points(self, points: np.ndarray) -> "ControlSpline":
        return ControlSpline(np.asarray(points, float).reshape(self.points.shape), self.weights)

    def shifted(self, n: int) -> "ControlSpline":
        """Warm start after executing ``n`` steps: advance, hold the last control, refit."""
        u = self.controls()
        if n > 0:
            u = np.vstack([u[n:], np.repeat(u[-1:], min(n, self.H), axis=0)])[: self.H]
        pts, *_ = np.linalg.lstsq(self.weights, u, rcond=None)
        return self.with_points(pts)


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class MPCConfig:
    horizon: int = 40
    control_points: int = 4
    dt: float = 0.01
    controller: str = "mppi"  # mppi | gauss_newton
    spline: str = "bezier"
    samples: int | None = None  # default K*C
    temperature: float = 1e-3
    noise_scale: float = 1.0
    mppi_iterations: int = 1
    gn_iterations: int = 1
    alpha: float = 1.0
    lm_damping: float = 1e-6
    fd_step: float = 1e-4  # relative to noise_scale
    max_halvings: int = 8
    replan_interval: int | None = None  # default ceil(H/4)
    threads: int = 1

    def __post_init__(self):
        if not (self.horizon >= self.control_points >= 1):
            raise ValueError("need horizon >= control_points >= 1")
        if self.controller not in ("mppi", "gauss_newton"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if not (self.dt > 0 and self.temperature > 0 and self.noise_scale > 0 and self.fd_step > 0):
            raise ValueError("dt, temperature, noise_scale and fd_step must be positive")
        if self.samples is not None and self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.mppi_iterations < 0 or self.gn_iterations < 0 or self.threads < 1:
            raise ValueError("iteration counts must be >= 0 and threads >= 1")
        if self.replan_interval is not None and self.replan_interval < 1:
            raise ValueError("replan_interval must be >= 1")

    def n_samples(self, C: int) -> int:
        return self.samples if self.samples is not None else self.control_points * C

    @property
    def stride(self) -> int:
        return self.replan_interval if self.replan_interval is not None else math.ceil(self.horizon / 4)

    @property
    def h_fd(self) -> float:
        return self.fd_step * self.noise_scale

    @property
    def iterations(self) -> int:
        return self.mppi_iterations if self.controller == "mppi" else self.gn_iterations


def _map(fn: Callable, items: Iterable, threads: int) -> list:
    """Ordered map; results do not depend on execution interleaving."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Update(NamedTuple):
    spline: ControlSpline
    reward: float
    objective: float
    rollouts: int
    line_search: int = 0


def _run(model, s0, B_c, spline, cfg, env, task, counter) -> Trajectory:
    return simulate(model, s0, B_c, spline.controls(), cfg.dt, env, task, counter, keep_contacts=False)


# ------------------------------------------------------------------ MPPI


def mppi_weights(objectives: np.ndarray, temperature: float) -> np.ndarray:
    J = np.asarray(objectives, float)
    z = (J - J.max()) / temperature
    w = np.exp(z)
    return w / w.sum()


def mppi_update(
    model: ReducedModel,
    s0: ReducedState,
    B_c: np.ndarray,
    spline: ControlSpline,
    cfg: MPCConfig,
    env: Environment,
    task: Task,
    rng: np.random.Generator,
    counter: SimCounter | None = None,
    iterations: int | None = None,
) -> Update:
    """Reward-weighted averaging of perturbed control points.

    Sample 0 is always the unperturbed spline.
    """
    n = cfg.n_samples(spline.C)
    iterations = cfg.mppi_iterations if iterations is None else iterations
    best_reward, best_obj = -np.inf, -np.inf
    rollouts = 0
    for _ in range(iterations):
        noise = cfg.noise_scale * rng.standard_normal((n,) + spline.points.shape)
        noise[0] = 0.0
        cands = spline.points[None] + noise
        trajs = _map(
            lambda p: _run(model, s0, B_c, spline.with_points(p), cfg, env, task, counter), cands, cfg.threads
        )
        rollouts += n
        J = np.array([t.objective for t in trajs])
        if not np.isfinite(J).any():
            raise ControllerError("all MPPI rollouts produced non-finite objectives")
        J = np.where(np.isfinite(J), J, -np.inf)
        w = mppi_weights(J, cfg.temperature)
        spline = spline.with_points(np.tensordot(w, cands, axes=1))
        i = int(np.argmax(J))
        if J[i] > best_obj:
            best_obj, best_reward = float(J[i]), trajs[i].total_reward
    return Update(spline, best_reward, best_obj, rollouts)


# ------------------------------------------------------------------ Gauss-Newton


def gn_jacobian(
    model: ReducedModel,
    s0: ReducedState,
    B_c: np.ndarray,
    spline: ControlSpline,
    cfg: MPCConfig,
    env: Environment,
    counter: SimCounter | None = None,
    h: float | None = None,
) -> np.ndarray:
    """Central-difference Jacobian of ``Q_r = (q^2..q^{H+1})`` w.r.t. the control points.

    Shape (H*M, K*C); exactly 2*K*C rollouts.
    """
    h = cfg.h_fd if h is None else h
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    x0 = spline.points.ravel()
    task = Task(direction=tuple(np.eye(model.dim)[0]))
    perturbed = []
    for j in range(x0.size):
        for sign in (1.0, -1.0):
            x = x0.copy()
            x[j] += sign * h
            perturbed.append(x)
    trajs = _map(
        lambda x: _run(model, s0, B_c, spline.with_points(x), cfg, env, task, counter), perturbed, cfg.threads
    )
    Q = np.array([t.q[1:].ravel() for t in trajs])
    if not np.all(np.isfinite(Q)):
        raise ControllerError("non-finite rollout in finite-difference Jacobian")
    return ((Q[0::2] - Q[1::2]) / (2 * h)).T


def _objective_terms(model, task, s0, spline, dt):
    """Gradient and Gauss-Newton curvature of R - Lambda w.r.t. (Q_r, control points)."""
    M = model.size
    H = spline.H
    P = state_weight_matrix(model, task)
    c = task.d @ model.com_map
    # v_n = (q^{n+1} - q^n)/dt  ->  V = D Q - e0 q^1/dt
    D = (np.eye(H * M) - np.eye(H * M, k=-M)) / dt
    IP = np.kron(np.eye(H), P)
    H_Q = 2.0 * D.T @ IP @ D
    r_grad = np.zeros(H * M)
    r_grad[-M:] = c
    S = spline.matrix
    H_u = 2.0 * task.w_u * S.T @ S
    return D, IP, H_Q, r_grad, H_u


def gauss_newton_update(
    model: ReducedModel,
    s0: ReducedState,
    B_c: np.ndarray,
    spline: ControlSpline,
    cfg: MPCConfig,
    env: Environment,
    task: Task,
    counter: SimCounter | None = None,
    base: Trajectory | None = None,
) -> Update:
    """One Gauss-Newton ascent step on ``R - Lambda`` with backtracking.

    ``R`` is linear in Q_r, so the curvature comes from the quadratic
    regularizer plus Levenberg damping.  The evaluation at the current
    point (unless ``base`` is supplied) counts toward the line-search tally.
    """
    ls = 0
    if base is None:
        base = _run(model, s0, B_c, spline, cfg, env, task, counter)
        ls += 1
    J0 = base.objective
    Jac = gn_jacobian(model, s0, B_c, spline, cfg, env, counter)
    D, IP, H_Q, r_grad, H_u = _objective_terms(model, task, s0, spline, cfg.dt)
    Q0 = base.q[1:].ravel()
    V = D @ Q0
    V[: model.size] -= s0.q / cfg.dt
    gQ = r_grad - 2.0 * D.T @ (IP @ V)
    x0 = spline.points.ravel()
    g = Jac.T @ gQ - H_u @ x0
    Hgn = Jac.T @ H_Q @ Jac + H_u + cfg.lm_damping * np.eye(x0.size)
    delta = np.linalg.solve(Hgn, g)
    n_jac = 2 * x0.size
    if not np.any(delta):
        return Update(spline, base.total_reward, J0, n_jac + ls, ls)
    alpha = cfg.alpha
    for _ in range(cfg.max_halvings + 1):
        trial = spline.with_points(x0 + alpha * delta)
        tr = _run(model, s0, B_c, trial, cfg, env, task, counter)
        ls += 1
        if np.isfinite(tr.objective) and tr.objective > J0:
            return Update(trial, tr.total_reward, tr.objective, n_jac + ls, ls)
        alpha *= 0.5
    return Update(spline, base.total_reward, J0, n_jac + ls, ls)


# ------------------------------------------------------------------ MPC loop


@dataclass
class MPCResult:
    trajectory: Trajectory
    total_reward: float
    total_regularizer: float
    replans: int
    rollouts: int


def mpc_run(
    model: ReducedModel,
    s0: ReducedState,
    B_c: np.ndarray,
    T: int,
    cfg: MPCConfig,
    env: Environment,
    task: Task,
    seed: int = 0,
    counter: SimCounter | None = None,
) -> MPCResult:
    """Optimize over H steps, execute ``cfg.stride`` of them, shift, repeat until T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    B_c = np.asarray(B_c, float)
    if B_c.shape[0] != model.control_dim:
        raise ValueError(f"B_c has {B_c.shape[0]} rows, model control space has {model.control_dim}")
    rng = np.random.default_rng(seed)
    spline = ControlSpline.zeros(cfg.horizon, cfg.control_points, B_c.shape[1], cfg.spline)
    traj = Trajectory.start(s0, B_c.shape[1])
    s = s0
    done = replans = rollouts = 0
    while done < T:
        for _ in range(cfg.iterations):
            if cfg.controller == "mppi":
                up = mppi_update(model, s, B_c, spline, cfg, env, task, rng, counter, iterations=1)
            else:
                up = gauss_newton_update(model, s, B_c, spline, cfg, env, task, counter)
            spline = up.spline
            rollouts += up.rollouts
        replans += 1
        n = min(cfg.stride, T - done)
        seg = simulate(model, s, B_c, spline.controls()[:n], cfg.dt, env, task, counter=None)
        if counter is not None:
            counter.add(steps=n, executed_steps=n, contact_failures=seg.contact_failures)
        traj.extend(seg)
        s = seg.end_state
        done += n
        spline = spline.shifted(n)
    return MPCResult(traj, traj.total_reward, traj.total_regularizer, replans, rollouts)
