"""Reduced-order (modal) model: the dynamics restricted to span(B_r)."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .fem import BasisMatrix, FullModel

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Integrator:
    """Per-timestep factorization of the implicit-Euler system matrix.

    ``A = I + dt*D_r + dt^2*K_r`` is SPD for dt > 0, so its inverse is formed
    once and reused for every step and every rollout.
    """

    dt: float
    a_inv: np.ndarray
    a_inv_k: np.ndarray  # dt * A^-1 K_r


@dataclass(frozen=True, eq=False)
class ReducedModel:
    """Modal dynamics ``qdd_r = -K_r q_r - D_r qd_r + (forces)`` with ``M_r = I``.

    ``q_r`` parameterizes the displacement from rest: the full configuration
    is ``q_rest + B_r q_r``.  Models built directly (toys) have no mesh and
    therefore no contact or drag surface.
    """

    stiffness: np.ndarray  # K_r (M, M)
    damping: np.ndarray  # D_r (M, M)
    com_map: np.ndarray  # (d, M): COM velocity = com_map @ qd_r
    spin_map: np.ndarray  # (1 or 3, M): angular velocity = spin_map @ qd_r
    total_mass: float
    actuation: np.ndarray  # (M, M_a): u_r = actuation @ B_c @ f_c
    eigenvalues: np.ndarray
    n_rigid: int = 0
    basis: np.ndarray | None = None  # (dN, M)
    rest_nodes: np.ndarray | None = None  # (N, d)
    faces: np.ndarray | None = None  # boundary faces, outward ordered
    length_scale: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        for name in ("stiffness", "damping", "com_map", "spin_map", "actuation", "eigenvalues"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = self.size
        if self.stiffness.shape != (m, m) or self.damping.shape != (m, m):
            raise ValueError("stiffness/damping must be square M x M")
        if self.com_map.shape[1] != m or self.actuation.shape[0] != m:
            raise ValueError("com_map/actuation dimension mismatch with M")
        if self.basis is not None and self.basis.shape[1] != m:
            raise ValueError("basis column count must equal M")

    @property
    def size(self) -> int:
        return self.stiffness.shape[0]

    @property
    def control_dim(self) -> int:
        """Ambient dimension of the control-space Grassmannian."""
        return self.actuation.shape[1]

    @property
    def dim(self) -> int:
        return self.com_map.shape[0]

    @property
    def has_mesh(self) -> bool:
        return self.basis is not None

    def internal_force(self, q_r: np.ndarray, qd_r: np.ndarray) -> np.ndarray:
        return -self.stiffness @ q_r - self.damping @ qd_r

    def reconstruct(self, q_r: np.ndarray) -> np.ndarray:
        """Full-space node positions ``q_rest + B_r q_r`` as an (N, d) array."""
        if self.basis is None:
            raise ValueError("model has no mesh to reconstruct")
        return self.rest_nodes + (self.basis @ q_r).reshape(self.rest_nodes.shape)

    def node_velocities(self, qd_r: np.ndarray) -> np.ndarray:
        return (self.basis @ qd_r).reshape(self.rest_nodes.shape)

    def gravity_force(self, g: np.ndarray) -> np.ndarray:
        # B_r^T M g_full == m_tot * com_map^T g
        return self.total_mass * (self.com_map.T @ np.asarray(g, float))

    def integrator(self, dt: float) -> Integrator:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        key = ("int", float(dt))
        with self._lock:
            it = self._cache.get(key)
            if it is None:
                A = np.eye(self.size) + dt * self.damping + dt * dt * self.stiffness
                a_inv = np.linalg.inv(0.5 * (A + A.T))
                it = Integrator(float(dt), a_inv, dt * (a_inv @ self.stiffness))
                self._cache[key] = it
        return it

    def projected_rows(self, normal: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Normal rows ``n^T B_i`` (N, M) plus tangential rows (N, d-1, M); also returns rest heights."""
        n = np.asarray(normal, float)
        key = ("rows", tuple(n))
        with self._lock:
            hit = self._cache.get(key)
            if hit is None:
                tangents = tangent_basis(n)
                Bn = self.basis.reshape(len(self.rest_nodes), self.dim, self.size)
                normal_rows = np.einsum("k,nkm->nm", n, Bn)
                tan_rows = np.einsum("tk,nkm->ntm", tangents, Bn)
                heights = self.rest_nodes @ n
                hit = (normal_rows, tan_rows, heights)
                self._cache[key] = hit
        return hit

    def face_geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """Rest unit outward normals and measures of boundary faces."""
        with self._lock:
            hit = self._cache.get("faces")
            if hit is None:
                from .fem import _face_normal

                raw = np.array([_face_normal(self.rest_nodes[f]) for f in self.faces])
                area = np.linalg.norm(raw, axis=1)
                hit = (raw / area[:, None], area)
                self._cache["faces"] = hit
        return hit

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "stiffness": self.stiffness.tolist(),
            "damping": self.damping.tolist(),
            "com_map": self.com_map.tolist(),
            "spin_map": self.spin_map.tolist(),
            "total_mass": self.total_mass,
            "actuation": self.actuation.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "n_rigid": self.n_rigid,
            "length_scale": self.length_scale,
        }
        if self.basis is not None:
            out["basis"] = self.basis.tolist()
            out["rest_nodes"] = self.rest_nodes.tolist()
            out["faces"] = self.faces.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ReducedModel":
        mesh_fields = {}
        if "basis" in data:
            mesh_fields = dict(
                basis=np.asarray(data["basis"], float),
                rest_nodes=np.asarray(data["rest_nodes"], float),
                faces=np.asarray(data["faces"], np.int64),
            )
        return cls(
            stiffness=data["stiffness"],
            damping=data["damping"],
            com_map=data["com_map"],
            spin_map=data["spin_map"],
            total_mass=float(data["total_mass"]),
            actuation=data["actuation"],
            eigenvalues=data["eigenvalues"],
            n_rigid=int(data["n_rigid"]),
            length_scale=float(data["length_scale"]),
            **mesh_fields,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def tangent_basis(normal: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the plane orthogonal to ``normal``."""
    n = np.asarray(normal, float)
    if len(n) == 2:
        return np.array([[n[1], -n[0]]])  # +x for an upward normal
    helper = np.eye(3)[np.argmin(np.abs(n))]
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2])


def reduce(model: FullModel, basis: BasisMatrix, *, actuate_rigid: bool = False,
           length_scale: float | None = None) -> ReducedModel:
    """Project the full model onto ``basis``.

    Unless ``actuate_rigid`` is set, actuation is confined to the elastic
    modes: internal actuators cannot exert net force or torque on the body.
    """
    B = basis.vectors
    if B.shape[0] != model.ndof:
        raise ValueError(f"basis has {B.shape[0]} rows but the model has {model.ndof} DOFs")
    d = model.dim
    K_r = B.T @ model.stiffness @ B
    K_r = 0.5 * (K_r + K_r.T)
    D_r = B.T @ model.damping @ B
    D_r = 0.5 * (D_r + D_r.T)
    nodes = model.mesh.nodes
    m_node = model.mass[::d]
    m_tot = float(m_node.sum())
    Bn = B.reshape(len(nodes), d, B.shape[1])
    com_map = np.einsum("n,nkm->km", m_node, Bn) / m_tot
    r = nodes - (m_node[:, None] * nodes).sum(0) / m_tot
    if d == 2:
        inertia = float((m_node * (r**2).sum(1)).sum())
        ang = np.einsum("n,nm->m", m_node * r[:, 0], Bn[:, 1]) - np.einsum("n,nm->m", m_node * r[:, 1], Bn[:, 0])
        spin_map = (ang / inertia)[None, :]
    else:
        inertia = np.einsum("n,nij->ij", m_node, (r**2).sum(1)[:, None, None] * np.eye(3) - r[:, :, None] * r[:, None, :])
        L = np.einsum("n,nkm->km", m_node, np.cross(r[:, :, None], Bn, axisa=1, axisb=1, axisc=1))
        spin_map = np.linalg.solve(inertia, L)
    M = B.shape[1]
    first = 0 if actuate_rigid else basis.n_rigid
    actuation = np.eye(M)[:, first:]
    if length_scale is None:
        edges = nodes[model.mesh.elements[:, 1]] - nodes[model.mesh.elements[:, 0]]
        length_scale = float(np.median(np.linalg.norm(edges, axis=1)))
    return ReducedModel(
        stiffness=K_r,
        damping=D_r,
        com_map=com_map,
        spin_map=spin_map,
        total_mass=m_tot,
        actuation=actuation,
        eigenvalues=basis.eigenvalues,
        n_rigid=basis.n_rigid,
        basis=B,
        rest_nodes=nodes,
        faces=model.mesh.boundary_faces(),
        length_scale=length_scale,
    )


def modal_toy(eigenvalues, com_rows, *, damping: float = 0.0, dim: int = 2, mass: float = 1.0) -> ReducedModel:
    """Mesh-free modal model with diagonal stiffness and a given COM map.

    ``com_rows`` is (dim, M): the COM velocity produced by unit modal velocity.
    Every mode is actuated.
    """
    lam = np.asarray(eigenvalues, float)
    M = len(lam)
    com = np.asarray(com_rows, float).reshape(dim, M)
    return ReducedModel(
        stiffness=np.diag(lam),
        damping=damping * np.eye(M),
        com_map=com,
        spin_map=np.zeros((1 if dim == 2 else 3, M)),
        total_mass=mass,
        actuation=np.eye(M),
        eigenvalues=lam,
        n_rigid=int(np.sum(lam == 0)),
    )


def double_integrator(mass: float = 1.0) -> ReducedModel:
    """One translation mode along +x; modal coordinate is mass-normalized."""
    return modal_toy([0.0], [[1.0 / np.sqrt(mass)], [0.0]], mass=mass)


def translation_plus_stiff_mode(stiff_eigenvalue: float = 1.0e4) -> ReducedModel:
    """Two modes: a free translation along +x and a stiff mode that moves nothing."""
    return modal_toy([0.0, stiff_eigenvalue], [[1.0, 0.0], [0.0, 0.0]])
