"""Linear finite-element model of a soft body and its modal basis.

Meshes are simplicial (triangles in 2D, tetrahedra in 3D).  Elasticity is
linear with Rayleigh damping and row-sum lumped mass, which keeps the
generalized eigenproblem exact and cheap at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
import scipy.linalg


class MeshError(ValueError):
    """Invalid mesh descriptor or mesh topology."""


class AssemblyError(RuntimeError):
    """Raised when an element cannot be assembled (e.g. it is inverted)."""


class ModalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray  # (N, d) rest positions
    elements: np.ndarray  # (E, d+1) node indices

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        elements = np.asarray(self.elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise MeshError(f"nodes must be (N, 2) or (N, 3), got {nodes.shape}")
        d = nodes.shape[1]
        if elements.ndim != 2 or elements.shape[1] != d + 1:
            raise MeshError(f"{d}D mesh needs elements with {d + 1} nodes, got {elements.shape}")
        nodes.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        self.validate()

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    def signed_volumes(self) -> np.ndarray:
        x = self.nodes[self.elements]  # (E, d+1, d)
        edges = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(edges) / (2.0 if self.dim == 2 else 6.0)

    def validate(self) -> None:
        n = self.node_count
        el = self.elements
        if len(el) == 0:
            raise MeshError("mesh has no elements")
        if el.min() < 0 or el.max() >= n:
            raise MeshError("element index out of range")
        srt = np.sort(el, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise MeshError("element with repeated node")
        vol = self.signed_volumes()
        bad = np.flatnonzero(vol <= 0)
        if len(bad):
            raise MeshError(f"element {bad[0]} has non-positive signed volume {vol[bad[0]]:.3e}")
        # union-find over element connectivity
        parent = np.arange(n)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for e in el:
            r0 = find(e[0])
            for j in e[1:]:
                rj = find(j)
                if rj != r0:
                    parent[rj] = r0
        roots = {find(i) for i in range(n)}
        if len(roots) != 1:
            raise MeshError(f"mesh has {len(roots)} connected components")

    def boundary_faces(self) -> np.ndarray:
        """Faces (edges in 2D, triangles in 3D) used by exactly one element.

        Returned faces are ordered so that their normal points outward.
        """
        d = self.dim
        counts: dict[tuple, list] = {}
        for ei, e in enumerate(self.elements):
            for skip in range(d + 1):
                face = tuple(int(v) for k, v in enumerate(e) if k != skip)
                counts.setdefault(tuple(sorted(face)), []).append((face, int(e[skip])))
        faces = []
        for key in sorted(counts):
            owners = counts[key]
            if len(owners) != 1:
                continue
            face, opposite = owners[0]
            face = list(face)
            n = _face_normal(self.nodes[face])
            if np.dot(n, self.nodes[opposite] - self.nodes[face[0]]) > 0:
                face[0], face[1] = face[1], face[0]
            faces.append(face)
        return np.asarray(faces, dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({"nodes": self.nodes.tolist(), "elements": self.elements.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Mesh":
        data = json.loads(text)
        return cls(np.asarray(data["nodes"], float), np.asarray(data["elements"], np.int64))


def _face_normal(pts: np.ndarray) -> np.ndarray:
    """Unnormalized normal of an edge (2D) or triangle (3D); length = face measure."""
    if pts.shape[1] == 2:
        t = pts[1] - pts[0]
        return np.array([t[1], -t[0]])
    return 0.5 * np.cross(pts[1] - pts[0], pts[2] - pts[0])


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 100.0
    poisson_ratio: float = 0.3
    density: float = 1.0
    rayleigh_alpha: float = 0.5
    rayleigh_beta: float = 0.002

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("youngs_modulus must be positive")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in (0, 0.5)")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.rayleigh_alpha < 0 or self.rayleigh_beta < 0:
            raise ValueError("Rayleigh coefficients must be non-negative")

    def elasticity_matrix(self, dim: int) -> np.ndarray:
        E, nu = self.youngs_modulus, self.poisson_ratio
        if dim == 2:
            # plane stress
            return E / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] = lam + 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


# ---------------------------------------------------------------- meshes


def _grid_triangles(ids: np.ndarray) -> list[list[int]]:
    """Split each lattice cell of a 2D id grid (ix, iy) into two triangles."""
    tris = []
    nx, ny = ids.shape
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
            if min(a, b, c, d) < 0:
                continue
            tris.append([a, b, c])
            tris.append([a, c, d])
    return tris


# Kuhn split of the unit cube into 6 tetrahedra sharing the main diagonal.
_CUBE_CORNERS = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)])
_KUHN = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
]


def bar(nx: int, ny: int, nz: int | None = None, spacing: float = 1.0) -> Mesh:
    """Regular bar with ``nx * ny (* nz)`` lattice nodes."""
    counts = [nx, ny] + ([] if nz is None else [nz])
    if any(int(c) != c or c < 2 for c in counts):
        raise MeshError(f"bar node counts must be integers >= 2, got {counts}")
    if not spacing > 0:
        raise MeshError(f"spacing must be positive, got {spacing}")
    if nz is None:
        ids = np.arange(nx * ny).reshape(nx, ny)
        xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        nodes = spacing * np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        return _oriented(nodes, _grid_triangles(ids))
    ids = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    xs, ys, zs = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    nodes = spacing * np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1).astype(float)
    tets = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                corner = [ids[i + a, j + b, k + c] for a, b, c in _CUBE_CORNERS]
                tets.extend([[corner[v] for v in t] for t in _KUHN])
    return _oriented(nodes, tets)


def cross_cells(arm_len: int, arm_width: int) -> set[tuple[int, int]]:
    """Lattice cells (lower-left corner) covered by a plus-shaped footprint."""
    L, w = arm_len, arm_width
    cells = set()
    for i in range(-L, w + L):
        for j in range(-L, w + L):
            in_h = 0 <= j < w
            in_v = 0 <= i < w
            if in_h or in_v:
                cells.add((i, j))
    return cells


def cross(arm_len: int, arm_width: int, spacing: float = 1.0, rotation_deg: float = 0.0) -> Mesh:
    """Plus-shaped body: a ``w x w`` hub with four ``arm_len x w`` arms (cell counts).

    ``rotation_deg=45`` turns it into an X standing on two legs.
    """
    if any(int(c) != c or c < 2 for c in (arm_len, arm_width)):
        raise MeshError(f"cross cell counts must be integers >= 2, got {(arm_len, arm_width)}")
    if not spacing > 0:
        raise MeshError(f"spacing must be positive, got {spacing}")
    cells = cross_cells(arm_len, arm_width)
    lo, hi = -arm_len, arm_width + arm_len
    ids = -np.ones((hi - lo + 1, hi - lo + 1), dtype=np.int64)
    pts = []
    for i in range(lo, hi + 1):
        for j in range(lo, hi + 1):
            touching = {(i - a, j - b) for a in (0, 1) for b in (0, 1)}
            if touching & cells:
                ids[i - lo, j - lo] = len(pts)
                pts.append((i, j))
    tris = []
    for i, j in sorted(cells):
        a, b = ids[i - lo, j - lo], ids[i - lo + 1, j - lo]
        c, d = ids[i - lo + 1, j - lo + 1], ids[i - lo, j - lo + 1]
        tris.append([a, b, c])
        tris.append([a, c, d])
    nodes = spacing * np.asarray(pts, dtype=float)
    nodes -= nodes.mean(axis=0)
    if rotation_deg:
        th = np.deg2rad(rotation_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        nodes = nodes @ rot.T
    return _oriented(nodes, tris)


def _oriented(nodes: np.ndarray, elements: Sequence[Sequence[int]]) -> Mesh:
    el = np.asarray(elements, dtype=np.int64)
    x = nodes[el]
    vol = np.linalg.det(x[:, 1:, :] - x[:, :1, :])
    flip = vol < 0
    el[flip, 0], el[flip, 1] = el[flip, 1].copy(), el[flip, 0].copy()
    return Mesh(nodes, el)


def build_mesh(spec: Mapping[str, Any]) -> Mesh:
    """Build a mesh from a descriptor such as ``{"shape": "bar", "nx": 4, "ny": 2}``.

    Optional ``elevation`` shifts the mesh so its lowest point along the
    vertical axis (y in 2D, z in 3D) sits at that height.
    """
    spec = dict(spec)
    shape = spec.pop("shape", None)
    elevation = spec.pop("elevation", None)
    try:
        if shape == "bar":
            mesh = bar(spec["nx"], spec["ny"], spec.get("nz"), spec.get("spacing", 1.0))
        elif shape == "cross":
            mesh = cross(
                spec["arm_len"], spec["arm_width"], spec.get("spacing", 1.0), spec.get("rotation_deg", 0.0)
            )
        else:
            raise MeshError(f"unknown mesh shape {shape!r} (expected 'bar' or 'cross')")
    except KeyError as exc:
        raise MeshError(f"mesh spec for {shape!r} is missing field {exc}") from None
    if elevation is not None:
        nodes = mesh.nodes.copy()
        up = 1 if mesh.dim == 2 else 2
        nodes[:, up] += float(elevation) - nodes[:, up].min()
        mesh = Mesh(nodes, mesh.elements)
    return mesh


def mesh_spacing(spec: Mapping[str, Any]) -> float:
    return float(spec.get("spacing", 1.0))


# ---------------------------------------------------------------- assembly


@dataclass(frozen=True)
class FullModel:
    mesh: Mesh
    material: Material
    mass: np.ndarray  # (dN,) lumped diagonal
    stiffness: np.ndarray  # (dN, dN)
    rest_volume: float

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def ndof(self) -> int:
        return self.mass.shape[0]

    @property
    def q_rest(self) -> np.ndarray:
        return self.mesh.nodes.ravel()

    @property
    def damping(self) -> np.ndarray:
        m = self.material
        return m.rayleigh_alpha * np.diag(self.mass) + m.rayleigh_beta * self.stiffness

    def force(self, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        """Internal elastic + Rayleigh damping force."""
        m = self.material
        return (
            -self.stiffness @ (q - self.q_rest)
            - m.rayleigh_alpha * self.mass * qdot
            - m.rayleigh_beta * (self.stiffness @ qdot)
        )


def _strain_displacement(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Constant strain-displacement matrix of a linear simplex and its measure."""
    d = x.shape[1]
    T = (x[1:] - x[0]).T  # d x d
    det = np.linalg.det(T)
    vol = det / (2.0 if d == 2 else 6.0)
    if not vol > 0:
        return None, vol
    grads_ref = np.vstack([-np.ones(d), np.eye(d)])  # (d+1, d)
    grads = grads_ref @ np.linalg.inv(T)  # rows: gradient of each shape fn
    n = d + 1
    if d == 2:
        B = np.zeros((3, 2 * n))
        B[0, 0::2] = grads[:, 0]
        B[1, 1::2] = grads[:, 1]
        B[2, 0::2] = grads[:, 1]
        B[2, 1::2] = grads[:, 0]
    else:
        B = np.zeros((6, 3 * n))
        gx, gy, gz = grads[:, 0], grads[:, 1], grads[:, 2]
        B[0, 0::3] = gx
        B[1, 1::3] = gy
        B[2, 2::3] = gz
        B[3, 0::3], B[3, 1::3] = gy, gx
        B[4, 1::3], B[4, 2::3] = gz, gy
        B[5, 0::3], B[5, 2::3] = gz, gx
    return B, vol


def assemble(mesh: Mesh, material: Material) -> FullModel:
    d = mesh.dim
    n_dof = d * mesh.node_count
    D = material.elasticity_matrix(d)
    K = np.zeros((n_dof, n_dof))
    mass = np.zeros(n_dof)
    total_vol = 0.0
    for ei, el in enumerate(mesh.elements):
        B, vol = _strain_displacement(mesh.nodes[el])
        if B is None:
            raise AssemblyError(f"element {ei} is inverted or degenerate (volume {vol:.3e})")
        ke = vol * (B.T @ D @ B)
        dofs = (d * el[:, None] + np.arange(d)[None, :]).ravel()
        K[np.ix_(dofs, dofs)] += ke
        mass[dofs] += material.density * vol / (d + 1)
        total_vol += vol
    K = 0.5 * (K + K.T)
    mass.setflags(write=False)
    K.setflags(write=False)
    return FullModel(mesh, material, mass, K, total_vol)


# ---------------------------------------------------------------- modal basis


@dataclass(frozen=True)
class BasisMatrix:
    vectors: np.ndarray  # (dN, M)
    eigenvalues: np.ndarray  # (M,) zero for rigid modes
    n_rigid: int

    @property
    def labels(self) -> list[str]:
        return ["rigid"] * self.n_rigid + ["elastic"] * (len(self.eigenvalues) - self.n_rigid)

    @property
    def size(self) -> int:
        return self.vectors.shape[1]


def rigid_vectors(nodes: np.ndarray, mass: np.ndarray) -> np.ndarray:
    """Analytic infinitesimal rigid motions, mass-orthonormalized (dN x d(d+1)/2)."""
    n, d = nodes.shape
    m_node = mass[::d]
    com = (m_node[:, None] * nodes).sum(0) / m_node.sum()
    r = nodes - com
    cols = []
    for k in range(d):
        t = np.zeros((n, d))
        t[:, k] = 1.0
        cols.append(t.ravel())
    if d == 2:
        cols.append(np.stack([-r[:, 1], r[:, 0]], axis=1).ravel())
    else:
        for k in range(3):
            axis = np.zeros(3)
            axis[k] = 1.0
            cols.append(np.cross(axis, r).ravel())
    R = np.stack(cols, axis=1)
    return _mass_orthonormalize(R, mass)


def _mass_orthonormalize(V: np.ndarray, mass: np.ndarray) -> np.ndarray:
    G = V.T @ (mass[:, None] * V)
    L = np.linalg.cholesky(0.5 * (G + G.T))
    return np.linalg.solve(L, V.T).T


def modal_basis(model: FullModel, m_dim: int) -> BasisMatrix:
    """Lowest ``m_dim`` modes of ``K phi = lambda M phi`` with analytic rigid modes."""
    d = model.dim
    n_rigid = d * (d + 1) // 2
    if m_dim < n_rigid + 1:
        raise ModalError(f"M={m_dim} must be at least {n_rigid + 1} (rigid modes + one elastic)")
    if m_dim > model.ndof:
        raise ModalError(f"M={m_dim} exceeds the number of degrees of freedom dN={model.ndof}")
    try:
        lam, phi = scipy.linalg.eigh(model.stiffness, np.diag(model.mass), subset_by_index=[0, m_dim - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ModalError(f"generalized eigen-solve failed: {exc}") from exc
    R = rigid_vectors(model.mesh.nodes, model.mass)
    E = phi[:, n_rigid:]
    # strip any rigid contamination, then restore mass-orthonormality
    E = E - R @ (R.T @ (model.mass[:, None] * E))
    E = _mass_orthonormalize(E, model.mass)
    lam_e = np.einsum("ij,ij->j", E, model.stiffness @ E)
    order = np.argsort(lam_e, kind="stable")
    E, lam_e = E[:, order], lam_e[order]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(E), axis=0)
    E = E * np.sign(E[idx, np.arange(E.shape[1])])
    vectors = np.hstack([R, E])
    eig = np.concatenate([np.zeros(n_rigid), lam_e])
    vectors.setflags(write=False)
    eig.setflags(write=False)
    return BasisMatrix(vectors, eig, n_rigid)
