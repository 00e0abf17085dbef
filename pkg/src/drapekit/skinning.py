"""Garment blend weights from body participation, plus nearest/k-nearest baselines."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .body import Pose, Skeleton, apply_affine, blend_transforms
from .mesh import TriMesh

M_FLOOR = 1e-4  # m, lower bound on the kernel width scale
DROP_BELOW = 1e-12
SCHEMES = ("rbf", "nearest", "knn")


class SkinningError(ValueError):
    pass


@dataclass
class GarmentWeights:
    weights: np.ndarray
    scheme: str
    k: float = float("nan")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.scheme not in SCHEMES:
            raise SkinningError(f"unknown scheme {self.scheme!r}")

    def max_row_deviation(self) -> float:
        return float(np.max(np.abs(self.weights.sum(axis=1) - 1.0), initial=0.0))


@dataclass
class ParticipationMatrix:
    P: sp.csr_matrix
    nearest_distance: np.ndarray

    def dense(self) -> np.ndarray:
        return self.P.toarray()


def rbf_kernel(r, m_i, k: float = 0.5):
    """Gaussian kernel exp(-r^2 / (k m_i^2)); ``m_i`` is floored at 1e-4 m."""
    m = np.maximum(np.asarray(m_i, dtype=np.float64), M_FLOOR)
    r = np.asarray(r, dtype=np.float64)
    return np.exp(-(r * r) / (k * m * m))


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _row_chunks(n: int, n_cols: int, budget: int = 1 << 22):
    step = max(1, budget // max(n_cols, 1))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def participation_matrix(garment: TriMesh, body: TriMesh, k: float = 0.5,
                         dense: bool = False) -> ParticipationMatrix:
    """Participation of every body vertex in every garment vertex.

    Entries below 1e-12 are dropped to sparse storage unless ``dense``.
    """
    if body.n_vertices == 0:
        raise SkinningError("empty body mesh")
    if k <= 0:
        raise SkinningError("kernel parameter k must be positive")
    g = garment.vertices
    b = body.vertices
    blocks = []
    m_all = np.empty(len(g))
    for sl in _row_chunks(len(g), len(b)):
        d = _pairwise_distances(g[sl], b)
        m = d.min(axis=1)
        m_all[sl] = m
        # the shifted argument is >= 0 since m is the row minimum
        p = rbf_kernel(d - m[:, None], m[:, None], k)
        if not dense:
            p[p < DROP_BELOW] = 0.0
        blocks.append(sp.csr_matrix(p))
    P = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, len(b)))
    return ParticipationMatrix(P, m_all)


def garment_weights_rbf(part: ParticipationMatrix, body_weights: np.ndarray, k: float = 0.5) -> GarmentWeights:
    W = np.asarray(body_weights, dtype=np.float64)
    if part.P.shape[1] != W.shape[0]:
        raise SkinningError(f"participation has {part.P.shape[1]} body columns, weights have {W.shape[0]} rows")
    raw = np.asarray(part.P @ W)
    s = raw.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise SkinningError("zero participation row")
    return GarmentWeights(raw / s, "rbf", k)


def _nearest_order(g: np.ndarray, b: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.empty((len(g), K), dtype=np.int64)
    dist = np.empty((len(g), K))
    for sl in _row_chunks(len(g), len(b)):
        d = _pairwise_distances(g[sl], b)
        if K == 1:
            # argmin returns the lowest index on ties
            o = np.argmin(d, axis=1)[:, None]
        else:
            o = np.argsort(d, axis=1, kind="stable")[:, :K]
        idx[sl] = o
        dist[sl] = np.take_along_axis(d, o, axis=1)
    return idx, dist


def garment_weights_nearest(garment: TriMesh, body: TriMesh, body_weights: np.ndarray) -> GarmentWeights:
    W = np.asarray(body_weights, dtype=np.float64)
    idx, _ = _nearest_order(garment.vertices, body.vertices, 1)
    return GarmentWeights(W[idx[:, 0]].copy(), "nearest")


def garment_weights_knn(garment: TriMesh, body: TriMesh, body_weights: np.ndarray, K: int) -> GarmentWeights:
    W = np.asarray(body_weights, dtype=np.float64)
    if K < 1 or K > body.n_vertices:
        raise SkinningError(f"K={K} outside [1, {body.n_vertices}]")
    idx, dist = _nearest_order(garment.vertices, body.vertices, K)
    zero = dist <= 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(zero, 0.0, 1.0 / dist)
    has_zero = zero.any(axis=1)
    inv[has_zero] = zero[has_zero].astype(np.float64)
    w = inv / inv.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkj->nj", w, W[idx])
    return GarmentWeights(out, "knn", float(K))


def compute_weights(scheme: str, garment: TriMesh, body: TriMesh, body_weights: np.ndarray,
                    k: float = 0.5, K: int = 4) -> GarmentWeights:
    if scheme == "rbf":
        return garment_weights_rbf(participation_matrix(garment, body, k), body_weights, k)
    if scheme == "nearest":
        return garment_weights_nearest(garment, body, body_weights)
    if scheme == "knn":
        return garment_weights_knn(garment, body, body_weights, K)
    raise SkinningError(f"unknown scheme {scheme!r}")


def skin_garment(garment: TriMesh, weights: GarmentWeights, skeleton: Skeleton, pose: Pose) -> TriMesh:
    W = weights.weights
    if W.shape != (garment.n_vertices, skeleton.n_joints):
        raise SkinningError(f"weights have shape {W.shape}, expected ({garment.n_vertices}, {skeleton.n_joints})")
    if not np.any(pose.rotations) and not np.any(pose.translation):
        return garment.copy()
    A, b = blend_transforms(W, skeleton, pose)
    return TriMesh(apply_affine(A, b, garment.vertices), garment.faces.copy())


def save_weights(gw: GarmentWeights, path) -> None:
    n, J = gw.weights.shape
    rows = [f"{n} {J} {gw.scheme} {gw.k:.17g}\n"]
    rows += [" ".join(f"{w:.17g}" for w in r) + "\n" for r in gw.weights.tolist()]
    Path(path).write_text("".join(rows))


def load_weights(path) -> GarmentWeights:
    lines = Path(path).read_text().splitlines()
    n, J, scheme, k = lines[0].split()
    n, J = int(n), int(J)
    W = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + n]]).reshape(n, J)
    return GarmentWeights(W, scheme, float(k))
