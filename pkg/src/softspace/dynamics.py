"""Forced reduced dynamics with floor contact and fluid drag; rollouts and scoring."""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _pgs
from .rom import SCHEMA_VERSION, ReducedModel, tangent_basis

MAX_OUTER = 50
OUTER_TOL = 1e-8
MAX_SWEEPS = 2000
SWEEP_TOL = 1e-12


@dataclass(frozen=True)
class ReducedState:
    """Modal displacement/velocity at time ``t``.

    ``contact_nodes``/``contact_local`` remember the last step's contact
    forces (local frame, rows ``[f_n, f_t...]``) to warm-start the next solve.
    """

    q: np.ndarray
    v: np.ndarray
    t: float = 0.0
    contact_nodes: np.ndarray | None = None
    contact_local: np.ndarray | None = None

    @classmethod
    def rest(cls, model: ReducedModel) -> "ReducedState":
        return cls(np.zeros(model.size), np.zeros(model.size), 0.0)


@dataclass(frozen=True)
class Environment:
    mode: str = "ground"  # ground | fluid
    normal: tuple = (0.0, 1.0)
    offset: float = 0.0
    friction: float = 0.8
    gravity: tuple | None = None  # None: -9.8 along -normal on ground, zero in fluid
    drag_coefficient: float = 1.0
    fluid_density: float = 1.0

    def __post_init__(self):
        if self.mode not in ("ground", "fluid"):
            raise ValueError(f"environment mode must be 'ground' or 'fluid', got {self.mode!r}")
        n = np.asarray(self.normal, float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("ground normal must have unit length")
        if self.friction < 0 or self.drag_coefficient < 0 or self.fluid_density < 0:
            raise ValueError("friction and drag parameters must be non-negative")
        object.__setattr__(self, "normal", tuple(float(x) for x in n))
        if self.gravity is not None:
            object.__setattr__(self, "gravity", tuple(float(x) for x in self.gravity))

    def gravity_vector(self, dim: int) -> np.ndarray:
        if self.gravity is not None:
            return np.asarray(self.gravity, float)
        if self.mode == "fluid":
            return np.zeros(dim)
        return -9.8 * np.asarray(self.normal, float)

    @classmethod
    def free_space(cls, dim: int = 2) -> "Environment":
        """Fluid-mode environment with no drag: contact-free and gravity-free."""
        return cls(mode="fluid", normal=tuple(np.eye(dim)[-1]), drag_coefficient=0.0)


@dataclass(frozen=True)
class Task:
    direction: tuple = (1.0, 0.0)
    w_rot: float = 0.1
    w_perp: float = 0.1
    w_u: float = 1e-4

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("task direction must be non-zero")
        object.__setattr__(self, "direction", tuple(float(x) for x in d / n))
        if min(self.w_rot, self.w_perp, self.w_u) < 0:
            raise ValueError("regularizer weights must be non-negative")

    @property
    def d(self) -> np.ndarray:
        return np.asarray(self.direction)


@dataclass(frozen=True)
class ContactSet:
    nodes: np.ndarray  # (nc,) node indices
    normal: np.ndarray  # (d,) shared ground normal
    gaps: np.ndarray  # (nc,) signed distance at the start of the step
    forces: np.ndarray  # (nc, d) world-frame contact forces
    normal_force: np.ndarray  # (nc,)
    tangent_force: np.ndarray  # (nc, d-1)
    normal_velocity: np.ndarray  # (nc,) gap rate n.v + gap/dt (the complementarity partner)
    tangent_velocity: np.ndarray  # (nc, d-1)
    reduced_force: np.ndarray  # (M,) f_e
    converged: bool = True
    iterations: int = 0

    @classmethod
    def empty(cls, model: ReducedModel, normal) -> "ContactSet":
        d = model.dim
        z = np.zeros(0)
        return cls(
            np.zeros(0, np.int64), np.asarray(normal, float), z, np.zeros((0, d)), z,
            np.zeros((0, d - 1)), z, np.zeros((0, d - 1)), np.zeros(model.size),
        )

    def __len__(self):
        return len(self.nodes)


class SimCounter:
    """Thread-safe tally of simulator work."""

    def __init__(self):
        self._lock = threading.Lock()
        self.steps = 0
        self.rollouts = 0
        self.executed_steps = 0
        self.contact_failures = 0

    def add(self, steps=0, rollouts=0, executed_steps=0, contact_failures=0):
        with self._lock:
            self.steps += steps
            self.rollouts += rollouts
            self.executed_steps += executed_steps
            self.contact_failures += contact_failures

    def snapshot(self) -> dict:
        with self._lock:
            return dict(
                steps=self.steps,
                rollouts=self.rollouts,
                executed_steps=self.executed_steps,
                contact_failures=self.contact_failures,
            )


# ------------------------------------------------------------------ contact


def contact_tolerance(model: ReducedModel) -> float:
    return 1e-3 * model.length_scale


def signed_distances(model: ReducedModel, q: np.ndarray, env: Environment) -> np.ndarray:
    rows, _, heights = model.projected_rows(env.normal)
    return heights + rows @ q - env.offset


def detect_contacts(model: ReducedModel, s: ReducedState, env: Environment, tol: float | None = None):
    """Nodes whose signed distance to the ground is at most ``tol``.

    Returns ``(node_indices, gaps)``; the shared contact normal is ``env.normal``.
    """
    if env.mode != "ground":
        raise ValueError("contact detection needs a ground environment")
    if not model.has_mesh:
        return np.zeros(0, np.int64), np.zeros(0)
    tol = contact_tolerance(model) if tol is None else tol
    dist = signed_distances(model, s.q, env)
    idx = np.flatnonzero(dist <= tol)
    return idx, dist[idx]


def solve_contact_forces(
    model: ReducedModel,
    v_free: np.ndarray,
    nodes: np.ndarray,
    gaps: np.ndarray,
    dt: float,
    env: Environment,
    warm: ReducedState | None = None,
) -> ContactSet:
    """Staggered-projection contact solve against the implicit velocity update.

    ``v_free`` is the end-of-step modal velocity without contact forces;
    contact forces ``f`` change it by ``dt * A^-1 J^T f``.  The normal
    partner velocity is ``n.v + gap/dt`` so that a converged solve leaves no
    node below the ground at the end of the step.
    """
    rows_n, rows_t, _ = model.projected_rows(env.normal)
    nc = len(nodes)
    d = model.dim
    nt = d - 1
    integ = model.integrator(dt)
    J = np.vstack([rows_n[nodes], rows_t[nodes].reshape(nc * nt, model.size)])
    G = np.ascontiguousarray(integ.a_inv @ J.T)
    b = J @ v_free
    b[:nc] += gaps / dt
    f0 = np.zeros(nc * d)
    if warm is not None and warm.contact_nodes is not None and len(warm.contact_nodes):
        pos = np.searchsorted(warm.contact_nodes, nodes)
        pos = np.minimum(pos, len(warm.contact_nodes) - 1)
        hit = warm.contact_nodes[pos] == nodes
        f0[:nc][hit] = warm.contact_local[pos[hit], 0]
        f0[nc:].reshape(nc, nt)[hit] = warm.contact_local[pos[hit], 1:]
    f, converged, iters = _pgs.staggered_projection(
        np.ascontiguousarray(J), G, b, f0, dt, nc, nt, float(env.friction), MAX_OUTER, OUTER_TOL, MAX_SWEEPS, SWEEP_TOL
    )
    w = b + dt * (J @ (G @ f))
    fn = f[:nc]
    ft = f[nc:].reshape(nc, nt)
    n = np.asarray(env.normal)
    T = tangent_basis(n)
    forces = fn[:, None] * n[None, :] + ft @ T
    return ContactSet(
        nodes=np.asarray(nodes),
        normal=n,
        gaps=np.asarray(gaps),
        forces=forces,
        normal_force=fn,
        tangent_force=ft,
        normal_velocity=w[:nc],
        tangent_velocity=w[nc:].reshape(nc, nt),
        reduced_force=J.T @ f,
        converged=bool(converged),
        iterations=int(iters),
    )


# ------------------------------------------------------------------ drag


def drag_force(model: ReducedModel, s: ReducedState, env: Environment) -> np.ndarray:
    """Leading-face pressure drag ``-c_d rho A max(n.v, 0)^2 n`` projected to modal space."""
    if env.mode != "fluid" or env.drag_coefficient == 0 or not model.has_mesh:
        return np.zeros(model.size)
    normals, area = model.face_geometry()
    V = model.node_velocities(s.v)
    faces = model.faces
    vf = V[faces].mean(axis=1)
    vn = np.maximum(np.einsum("fk,fk->f", normals, vf), 0.0)
    mag = env.drag_coefficient * env.fluid_density * area * vn**2
    face_force = -mag[:, None] * normals / faces.shape[1]
    nodal = np.zeros_like(V)
    for k in range(faces.shape[1]):
        np.add.at(nodal, faces[:, k], face_force)
    return model.basis.T @ nodal.ravel()


# ------------------------------------------------------------------ stepping


def step(
    model: ReducedModel,
    s: ReducedState,
    u_r: np.ndarray,
    env: Environment,
    dt: float,
    counter: SimCounter | None = None,
) -> tuple[ReducedState, ContactSet]:
    """One implicit-Euler step of the forced modal dynamics.

    Solves ``(v+ - v)/dt = -K q+ - D v+ + f_g + f_d + f_e + u_r`` with
    ``q+ = q + dt v+`` (``M_r = I``).
    """
    integ = model.integrator(dt)
    F = np.asarray(u_r, float) + model.gravity_force(env.gravity_vector(model.dim))
    if env.mode == "fluid":
        F = F + drag_force(model, s, env)
    v_free = integ.a_inv @ (s.v + dt * F) - integ.a_inv_k @ s.q
    contacts = None
    if env.mode == "ground" and model.has_mesh:
        tol = contact_tolerance(model)
        gap_now = signed_distances(model, s.q, env)
        rows_n, _, _ = model.projected_rows(env.normal)
        predicted = gap_now + dt * (rows_n @ v_free)
        idx = np.flatnonzero(predicted <= tol)
        if len(idx):
            contacts = solve_contact_forces(model, v_free, idx, gap_now[idx], dt, env, warm=s)
            v_free = v_free + dt * (integ.a_inv @ contacts.reduced_force)
            if counter is not None and not contacts.converged:
                counter.add(contact_failures=1)
    if contacts is None:
        contacts = ContactSet.empty(model, env.normal)
    q_new = s.q + dt * v_free
    if counter is not None:
        counter.add(steps=1)
    if len(contacts):
        local = np.hstack([contacts.normal_force[:, None], contacts.tangent_force])
        return ReducedState(q_new, v_free, s.t + dt, contacts.nodes, local), contacts
    return ReducedState(q_new, v_free, s.t + dt), contacts


# ------------------------------------------------------------------ scoring


def reward(model: ReducedModel, s_next: ReducedState, task: Task, dt: float) -> float:
    """Distance travelled along the task direction during one step: d . v_com * dt."""
    return float(task.d @ (model.com_map @ s_next.v)) * dt


def regularizer_terms(model: ReducedModel, task: Task, velocities: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Per-step weighted regularizer terms (see ``Task`` for the weights)."""
    velocities = np.atleast_2d(velocities)
    controls = np.atleast_2d(controls)
    spin = velocities @ model.spin_map.T
    vcom = velocities @ model.com_map.T
    d = task.d
    perp = vcom - np.outer(vcom @ d, d)
    return (
        task.w_rot * (spin**2).sum(1)
        + task.w_perp * (perp**2).sum(1)
        + task.w_u * (controls**2).sum(1)
    )


def regularizer(model: ReducedModel, task: Task, velocities: np.ndarray, controls: np.ndarray) -> float:
    if len(velocities) == 0:
        return 0.0
    return float(regularizer_terms(model, task, velocities, controls).sum())


def state_weight_matrix(model: ReducedModel, task: Task) -> np.ndarray:
    """PSD ``P`` with per-step state regularizer ``v^T P v``."""
    d = task.d
    proj = np.eye(len(d)) - np.outer(d, d)
    return task.w_rot * model.spin_map.T @ model.spin_map + task.w_perp * model.com_map.T @ proj @ model.com_map


# ------------------------------------------------------------------ rollout


@dataclass
class Trajectory:
    q: np.ndarray  # (T+1, M)
    v: np.ndarray  # (T+1, M)
    t: np.ndarray  # (T+1,)
    controls: np.ndarray  # (T, C)
    rewards: np.ndarray  # (T,)
    reg_terms: np.ndarray  # (T,)
    contacts: list = field(default_factory=list)
    contact_failures: int = 0
    end_state: ReducedState | None = None  # final state incl. contact warm start

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def total_regularizer(self) -> float:
        return float(self.reg_terms.sum())

    @property
    def objective(self) -> float:
        return self.total_reward - self.total_regularizer

    @property
    def final_state(self) -> ReducedState:
        return ReducedState(self.q[-1].copy(), self.v[-1].copy(), float(self.t[-1]))

    @classmethod
    def start(cls, s0: ReducedState, C: int) -> "Trajectory":
        return cls(
            q=s0.q[None, :].copy(),
            v=s0.v[None, :].copy(),
            t=np.array([s0.t]),
            controls=np.zeros((0, C)),
            rewards=np.zeros(0),
            reg_terms=np.zeros(0),
            end_state=s0,
        )

    def extend(self, other: "Trajectory") -> None:
        """Append ``other`` (which must start at this trajectory's final state)."""
        self.q = np.vstack([self.q, other.q[1:]])
        self.v = np.vstack([self.v, other.v[1:]])
        self.t = np.concatenate([self.t, other.t[1:]])
        self.controls = np.vstack([self.controls, other.controls])
        self.rewards = np.concatenate([self.rewards, other.rewards])
        self.reg_terms = np.concatenate([self.reg_terms, other.reg_terms])
        self.contacts.extend(other.contacts)
        self.contact_failures += other.contact_failures
        self.end_state = other.end_state

    def contact_stats(self) -> dict:
        counts = [len(c) for c in self.contacts]
        return {
            "steps_with_contact": int(sum(1 for c in counts if c)),
            "max_contacts": int(max(counts, default=0)),
            "mean_contacts": float(np.mean(counts)) if counts else 0.0,
            "nonconverged_solves": int(self.contact_failures),
        }


def simulate(
    model: ReducedModel,
    s0: ReducedState,
    B_c: np.ndarray,
    controls: np.ndarray,
    dt: float,
    env: Environment,
    task: Task,
    counter: SimCounter | None = None,
    keep_contacts: bool = True,
) -> Trajectory:
    """Roll out per-step control-space forces ``controls`` (H, C)."""
    controls = np.atleast_2d(np.asarray(controls, float)).reshape(-1, B_c.shape[1])
    H = len(controls)
    M = model.size
    q = np.empty((H + 1, M))
    v = np.empty((H + 1, M))
    t = np.empty(H + 1)
    q[0], v[0], t[0] = s0.q, s0.v, s0.t
    act = model.actuation @ B_c
    rewards = np.empty(H)
    contacts = []
    failures = 0
    s = s0
    d_com = task.d @ model.com_map
    for n in range(H):
        s, cs = step(model, s, act @ controls[n], env, dt)
        q[n + 1], v[n + 1], t[n + 1] = s.q, s.v, s.t
        rewards[n] = float(d_com @ s.v) * dt
        if not cs.converged:
            failures += 1
        if keep_contacts:
            contacts.append(cs)
    if counter is not None:
        counter.add(steps=H, rollouts=1, contact_failures=failures)
    reg = regularizer_terms(model, task, v[1:], controls) if H else np.zeros(0)
    return Trajectory(q, v, t, controls, rewards, reg, contacts, failures, s)


def rollout(model, s0, B_c, spline, dt, env, task, counter=None, keep_contacts=True) -> Trajectory:
    """Roll out a control spline: step ``n`` applies ``u_r = B_c (S F~)_n``."""
    return simulate(model, s0, B_c, spline.controls(), dt, env, task, counter, keep_contacts)


# ------------------------------------------------------------------ export


def export_trajectory(traj: Trajectory, csv_path, json_path=None, extra: dict | None = None) -> None:
    M = traj.q.shape[1]
    C = traj.controls.shape[1]
    header = (
        ["t"] + [f"q_r[{i}]" for i in range(M)] + [f"qd_r[{i}]" for i in range(M)]
        + [f"f_c[{i}]" for i in range(C)] + ["R_n"]
    )
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n in range(traj.length):
            w.writerow(
                [repr(float(traj.t[n + 1]))]
                + [repr(float(x)) for x in traj.q[n + 1]]
                + [repr(float(x)) for x in traj.v[n + 1]]
                + [repr(float(x)) for x in traj.controls[n]]
                + [repr(float(traj.rewards[n]))]
            )
    if json_path is not None:
        summary = {
            "schema_version": SCHEMA_VERSION,
            "reward": traj.total_reward,
            "lambda": traj.total_regularizer,
            "steps": traj.length,
            "contacts": traj.contact_stats(),
        }
        summary.update(extra or {})
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)


def load_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    return {name: body[:, i] for i, name in enumerate(header)}


def com_position(model: ReducedModel, q: np.ndarray) -> np.ndarray:
    """COM displacement from rest (linear in q_r)."""
    return model.com_map @ q


def kinetic_plus_elastic(model: ReducedModel, s: ReducedState) -> float:
    return 0.5 * float(s.v @ s.v) + 0.5 * float(s.q @ model.stiffness @ s.q)


def as_states(traj: Trajectory) -> Sequence[ReducedState]:
    return [ReducedState(traj.q[i], traj.v[i], float(traj.t[i])) for i in range(len(traj.t))]
