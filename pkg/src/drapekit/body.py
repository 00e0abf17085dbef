"""Skeletal body model: linear blend skinning and signed distance queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .mesh import MeshError, Topology, TriMesh, load_obj


class BodyError(ValueError):
    pass


@dataclass
class Skeleton:
    parents: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if len(self.parents) != len(self.joints):
            raise BodyError("parent table and joint table differ in length")
        if len(self.parents) == 0:
            raise BodyError("skeleton needs at least one joint")
        if self.parents[0] != -1:
            raise BodyError("joint 0 must be the root (parent -1)")
        self.order = self._topological_order()

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def _topological_order(self) -> np.ndarray:
        n = len(self.parents)
        children = [[] for _ in range(n)]
        for j, p in enumerate(self.parents.tolist()):
            if j == 0:
                continue
            if p < 0 or p >= n or p == j:
                raise BodyError(f"joint {j} has invalid parent {p}")
            children[p].append(j)
        order, stack = [], [0]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != n:
            raise BodyError("parent indices do not form a tree rooted at joint 0")
        return np.array(order, dtype=np.int64)


@dataclass
class Pose:
    """Axis-angle rotation per joint (radians) and a root translation (m)."""

    rotations: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.rotations)) and np.all(np.isfinite(self.translation))):
            raise BodyError("pose contains non-finite values")

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))


@dataclass
class SkinnedBody:
    mesh: TriMesh
    skeleton: Skeleton
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        W = self.weights
        if W.shape != (self.mesh.n_vertices, self.skeleton.n_joints):
            raise BodyError(f"weight matrix has shape {W.shape}, expected "
                            f"({self.mesh.n_vertices}, {self.skeleton.n_joints})")
        if np.any(W < 0) or np.max(np.abs(W.sum(axis=1) - 1.0), initial=0.0) > 1e-6:
            raise BodyError("body weight rows must be nonnegative and sum to 1")


def joint_transforms(skeleton: Skeleton, pose: Pose):
    """Per-joint skinning transforms ``v -> R[j] @ v + t[j]`` for a pose."""
    J = skeleton.n_joints
    if pose.rotations.shape[0] != J:
        raise BodyError(f"pose has {pose.rotations.shape[0]} joints, skeleton has {J}")
    local = Rotation.from_rotvec(pose.rotations).as_matrix()
    Rg = np.empty((J, 3, 3))
    Jg = np.empty((J, 3))
    rest = skeleton.joints
    for j in skeleton.order:
        p = skeleton.parents[j]
        if p < 0:
            Rg[j] = local[j]
            Jg[j] = rest[j]
        else:
            Rg[j] = Rg[p] @ local[j]
            Jg[j] = Rg[p] @ (rest[j] - rest[p]) + Jg[p]
    t = Jg - np.einsum("jab,jb->ja", Rg, rest) + pose.translation
    return Rg, t


def blend_transforms(weights: np.ndarray, skeleton: Skeleton, pose: Pose):
    """Per-vertex affine maps ``x -> A[i] @ x + b[i]`` of linear blend skinning."""
    R, t = joint_transforms(skeleton, pose)
    A = np.einsum("nj,jab->nab", weights, R)
    b = weights @ t
    return A, b


def apply_affine(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("nab,nb->na", A, x) + b


def pose_body(body: SkinnedBody, pose: Pose) -> TriMesh:
    if not np.any(pose.rotations) and not np.any(pose.translation):
        return body.mesh.copy()
    A, b = blend_transforms(body.weights, body.skeleton, pose)
    return TriMesh(apply_affine(A, b, body.mesh.vertices), body.mesh.faces.copy())


# -- signed distance ---------------------------------------------------------

REGION_FACE, REGION_EDGE, REGION_VERTEX = 0, 1, 2


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (M, 3).

    Returns ``(points, region)`` where region is face/edge/vertex.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom

    out = a + ab * v[:, None] + ac * w[:, None]
    region = np.full(len(p), REGION_FACE, dtype=np.int8)
    # assign in reverse priority so earlier tests win
    for mask, pt, reg in (
        (in_bc, b + (c - b) * t_bc[:, None], REGION_EDGE),
        (in_ac, a + ac * t_ac[:, None], REGION_EDGE),
        (in_c, c, REGION_VERTEX),
        (in_ab, a + ab * t_ab[:, None], REGION_EDGE),
        (in_b, b, REGION_VERTEX),
        (in_a, a, REGION_VERTEX),
    ):
        out[mask] = pt[mask]
        region[mask] = reg
    return out, region


def winding_number(tris: np.ndarray, points: np.ndarray, chunk: int = 1 << 19) -> np.ndarray:
    """Generalized winding number of a triangle soup (T, 3, 3) at points (M, 3)."""
    points = np.atleast_2d(points)
    out = np.empty(len(points))
    T = len(tris)
    step = max(1, chunk // max(T, 1))
    A, B, C = (np.ascontiguousarray(tris[:, k].T) for k in range(3))   # (3, T) each
    for s in range(0, len(points), step):
        q = points[s:s + step]
        ax, ay, az = (A[k][None, :] - q[:, k, None] for k in range(3))
        bx, by, bz = (B[k][None, :] - q[:, k, None] for k in range(3))
        cx, cy, cz = (C[k][None, :] - q[:, k, None] for k in range(3))
        la = np.sqrt(ax * ax + ay * ay + az * az)
        lb = np.sqrt(bx * bx + by * by + bz * bz)
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        det = (ax * (by * cz - bz * cy) + ay * (bz * cx - bx * cz) + az * (bx * cy - by * cx))
        den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
               + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
        out[s:s + step] = np.arctan2(det, den).sum(axis=1) / (2.0 * np.pi)
    return out


@dataclass(frozen=True)
class SignedDistanceResult:
    distance: float
    closest: np.ndarray
    normal: np.ndarray


class BodySDF:
    """Signed distance to a watertight triangle mesh.

    Candidate triangles come from a KD-tree over triangle centroids, pruned
    with the nearest-vertex distance as an upper bound. Points whose closest
    feature is a face interior take the sign of the face normal; points
    closest to an edge or vertex are classified by the generalized winding
    number (``sign_mode="winding"`` uses the winding number for every point).

    Instances are immutable after construction and safe for concurrent queries.
    """

    def __init__(self, mesh: TriMesh, sign_mode: str = "hybrid"):
        topo = Topology.from_mesh(mesh)
        if topo.n_boundary_edges:
            raise BodyError(f"body mesh is not watertight ({topo.n_boundary_edges} boundary edges)")
        if sign_mode not in ("hybrid", "winding"):
            raise ValueError(f"unknown sign mode {sign_mode!r}")
        self.mesh = mesh
        self.sign_mode = sign_mode
        self.tris = mesh.vertices[mesh.faces]
        n = np.cross(self.tris[:, 1] - self.tris[:, 0], self.tris[:, 2] - self.tris[:, 0])
        self.face_normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        self.centroids = self.tris.mean(axis=1)
        self.radii = np.linalg.norm(self.tris - self.centroids[:, None], axis=2).max(axis=1)
        self.max_radius = float(self.radii.max())
        self._ctree = cKDTree(self.centroids)
        self._vtree = cKDTree(mesh.vertices)

    def query(self, points: np.ndarray):
        """Return ``(distance, closest, normal)`` arrays for points (M, 3)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        M = len(points)
        if M == 0:
            return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
        ub, _ = self._vtree.query(points)
        cand = self._ctree.query_ball_point(points, ub * (1 + 1e-9) + self.max_radius + 1e-12)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=M)
        tri_idx = np.fromiter((t for c in cand for t in c), dtype=np.int64, count=int(counts.sum()))
        q_idx = np.repeat(np.arange(M), counts)
        tr = self.tris[tri_idx]
        cp, region = closest_point_on_triangles(points[q_idx], tr[:, 0], tr[:, 1], tr[:, 2])
        d2 = np.einsum("ij,ij->i", points[q_idx] - cp, points[q_idx] - cp)
        # per query: smallest distance, ties to the lowest triangle index
        order = np.lexsort((tri_idx, d2, q_idx))
        first = order[np.searchsorted(q_idx[order], np.arange(M))]
        closest = cp[first]
        reg = region[first]
        tri = tri_idx[first]
        diff = points - closest
        dist = np.sqrt(d2[first])

        fn = self.face_normals[tri]
        inside = np.einsum("ij,ij->i", diff, fn) < 0
        if self.sign_mode == "winding":
            need = np.ones(M, dtype=bool)
        else:
            need = reg != REGION_FACE
        need &= dist > 0
        if np.any(need):
            inside[need] = winding_number(self.tris, points[need]) > 0.5
        inside &= dist > 0
        sign = np.where(inside, -1.0, 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            normal = diff / dist[:, None] * sign[:, None]
        tiny = dist < 1e-12
        normal[tiny] = fn[tiny]
        return sign * dist, closest, normal

    def signed_distance(self, point) -> SignedDistanceResult:
        d, c, n = self.query(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return SignedDistanceResult(float(d[0]), c[0], n[0])


def signed_distance(sdf: BodySDF, point) -> SignedDistanceResult:
    return sdf.signed_distance(point)


# -- file formats ------------------------------------------------------------

def load_body(path) -> SkinnedBody:
    """Read a body file.

    Layout::

        mesh <rest OBJ path, relative to the body file>
        joints <J>
        <index> <parent> <x> <y> <z>      (J lines, parent -1 for the root)
        weights <N> <J>
        <w_0> ... <w_J-1>                 (N lines)
    """
    path = Path(path)
    lines = [ln.split("#", 1)[0].strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    it = iter(enumerate(lines))
    mesh = None
    parents = joints = W = None
    for _, ln in it:
        tok = ln.split()
        key = tok[0].lower()
        if key == "mesh":
            mesh_path = Path(ln.split(None, 1)[1])
            if not mesh_path.is_absolute():
                mesh_path = path.parent / mesh_path
            mesh = load_obj(mesh_path)
        elif key == "joints":
            J = int(tok[1])
            rows = [next(it)[1].split() for _ in range(J)]
            idx = [int(r[0]) for r in rows]
            if idx != list(range(J)):
                raise BodyError("joint table must list indices 0..J-1 in order")
            parents = [int(r[1]) for r in rows]
            joints = [[float(v) for v in r[2:5]] for r in rows]
        elif key == "weights":
            N, J = int(tok[1]), int(tok[2])
            W = np.array([[float(v) for v in next(it)[1].split()] for _ in range(N)]).reshape(N, J)
        else:
            raise BodyError(f"unknown body-file section {tok[0]!r}")
    if mesh is None or parents is None or W is None:
        raise BodyError("body file needs mesh, joints and weights sections")
    try:
        mesh.validate()
    except MeshError as exc:
        raise BodyError(str(exc)) from None
    return SkinnedBody(mesh, Skeleton(parents, joints), W)


def save_body(body: SkinnedBody, path, mesh_name: str) -> None:
    path = Path(path)
    out = [f"mesh {mesh_name}\n", f"joints {body.skeleton.n_joints}\n"]
    for j, (p, q) in enumerate(zip(body.skeleton.parents.tolist(), body.skeleton.joints.tolist())):
        out.append(f"{j} {p} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g}\n")
    out.append(f"weights {body.weights.shape[0]} {body.weights.shape[1]}\n")
    out += [" ".join(f"{w:.17g}" for w in row) + "\n" for row in body.weights.tolist()]
    path.write_text("".join(out))


def load_poses(path, n_joints: int | None = None) -> list[Pose]:
    """One frame per line: ``tx ty tz`` then J axis-angle triples."""
    poses = []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        vals = np.array([float(v) for v in ln.split()])
        if len(vals) < 6 or (len(vals) - 3) % 3:
            raise BodyError(f"pose line {lineno}: expected 3 + 3J values, got {len(vals)}")
        if n_joints is not None and (len(vals) - 3) // 3 != n_joints:
            raise BodyError(f"pose line {lineno}: {(len(vals) - 3) // 3} joints, skeleton has {n_joints}")
        poses.append(Pose(vals[3:].reshape(-1, 3), vals[:3]))
    return poses


def save_poses(poses, path) -> None:
    rows = []
    for p in poses:
        vals = np.concatenate([p.translation, p.rotations.ravel()])
        rows.append(" ".join(f"{v:.17g}" for v in vals) + "\n")
    Path(path).write_text("".join(rows))
