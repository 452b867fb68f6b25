"""Points on the Grassmannian Gr(M, C), represented by orthonormal M x C bases."""

from __future__ import annotations

import numpy as np


def is_orthonormal(B: np.ndarray, tol: float = 1e-8) -> bool:
    B = np.asarray(B, float)
    if B.ndim != 2 or B.shape[1] > B.shape[0]:
        return False
    return bool(np.abs(B.T @ B - np.eye(B.shape[1])).max() <= tol)


def check_point(B: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    B = np.asarray(B, float)
    if not is_orthonormal(B, tol):
        raise ValueError(f"basis of shape {B.shape} does not have orthonormal columns")
    return B


def _sign_normalize(Q: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(Q), axis=0)
    s = np.sign(Q[idx, np.arange(Q.shape[1])])
    s[s == 0] = 1.0
    return Q * s


def random_grassmann(M: int, C: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed subspace: thin QR of a Gaussian matrix."""
    if not (1 <= C < M):
        raise ValueError(f"need 1 <= C < M, got M={M}, C={C}")
    while True:
        Q, R = np.linalg.qr(rng.standard_normal((M, C)))
        if np.min(np.abs(np.diag(R))) > 1e-10:
            return _sign_normalize(Q)


def identity_point(M: int, C: int) -> np.ndarray:
    if not (1 <= C <= M):
        raise ValueError(f"need 1 <= C <= M, got M={M}, C={C}")
    return np.eye(M)[:, :C]


def projector(B: np.ndarray) -> np.ndarray:
    return B @ B.T


def distance(Bi: np.ndarray, Bj: np.ndarray) -> float:
    """Frobenius distance between projectors.

    Equals ``sqrt(2C - 2 ||Bi^T Bj||_F^2)``; evaluated as
    ``sqrt(2) ||Bj - Bi Bi^T Bj||_F`` to avoid cancellation near zero.
    """
    Bi = np.asarray(Bi, float)
    Bj = np.asarray(Bj, float)
    if Bi.shape != Bj.shape:
        raise ValueError(f"basis shapes differ: {Bi.shape} vs {Bj.shape}")
    return float(np.sqrt(2.0) * np.linalg.norm(Bj - Bi @ (Bi.T @ Bj)))


def sq_distances(B: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Squared projector distances from ``B`` (M, C) to each of ``others`` (n, M, C)."""
    resid = others - B @ np.einsum("md,nmc->ndc", B, others)
    return 2.0 * np.sum(resid**2, axis=(1, 2))


def pairwise_sq_distances(Bs: np.ndarray) -> np.ndarray:
    Bs = np.asarray(Bs, float)
    overlap = np.einsum("imc,jmd->ijcd", Bs, Bs)
    # residual of B_j after projecting onto span(B_i)
    resid = Bs[None] - np.einsum("imc,ijcd->ijmd", Bs, overlap)
    D2 = 2.0 * np.sum(resid**2, axis=(2, 3))
    D2 = 0.5 * (D2 + D2.T)
    np.fill_diagonal(D2, 0.0)
    return D2


def tangent_project(B: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Project an ambient direction onto the tangent space at ``B`` (embedded metric)."""
    BtG = B.T @ G
    return G - B @ (0.5 * (BtG + BtG.T))


def retract(B: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """QR retraction with a positive-diagonal R (so it is continuous in ``xi``)."""
    Q, R = np.linalg.qr(B + xi)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


grassmann_distance = distance
