"""Indexed triangle meshes, OBJ I/O and the topology queries used by the energies."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for malformed OBJ files or meshes that break topological assumptions."""


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self, vertices=None) -> "TriMesh":
        v = self.vertices.copy() if vertices is None else vertices
        return TriMesh(v, self.faces.copy())

    def validate(self, require_area: bool = False) -> None:
        f = self.faces
        if len(f) and (f.min() < 0 or f.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face (repeated vertex index)")
        if require_area and len(f):
            area = face_areas(self.vertices, f)
            if np.any(area <= 0.0):
                raise MeshError(f"zero-area face at index {int(np.argmin(area))}")


@dataclass(frozen=True)
class EdgeStencil:
    """Undirected edge (i < j) with its opposite vertices.

    For interior edges ``opposite[0]`` lies in the face that traverses the
    edge as i -> j, ``opposite[1]`` in the face that traverses it as j -> i.
    """

    edge: tuple[int, int]
    opposite: tuple[int, ...]
    interior: bool


@dataclass(frozen=True)
class OneRing:
    center: int
    neighbors: tuple[int, ...]


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def load_obj(path) -> TriMesh:
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshError(f"parse error at line {lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError:
                    raise MeshError(f"parse error at line {lineno}: bad vertex coordinate") from None
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshError(f"non-triangle face at line {lineno}")
                idx = []
                for t in tok[1:]:
                    try:
                        k = int(t.split("/", 1)[0])
                    except ValueError:
                        raise MeshError(f"parse error at line {lineno}: bad face index {t!r}") from None
                    # negative indices are relative to the vertices read so far
                    k = k - 1 if k > 0 else len(verts) + k
                    if k < 0 or k >= len(verts):
                        raise MeshError(f"out-of-range index at line {lineno}: {t}")
                    idx.append(k)
                faces.append(idx)
            # vn, vt, g, o, s, usemtl, mtllib ... are ignored
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path) -> None:
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    tmp.replace(path)


def _directed_edge_table(faces: np.ndarray):
    """Rows of (u, v, opposite) for every directed half-edge u -> v."""
    f = faces
    u = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    v = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    w = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    return u, v, w


@dataclass
class Topology:
    """Array form of the edge stencils and one-rings.

    ``edges`` are sorted (i < j, lexicographic). ``opposite`` holds -1 where a
    boundary edge has no second face. ``rings`` is padded with -1; ``ring_mask``
    flags real entries. The closed ring lists the center first.
    """

    edges: np.ndarray
    opposite: np.ndarray
    interior: np.ndarray
    rings: np.ndarray
    ring_mask: np.ndarray
    closed: bool = True
    n_boundary_edges: int = field(init=False)

    def __post_init__(self):
        self.n_boundary_edges = int((~self.interior).sum())

    @property
    def ring_sizes(self) -> np.ndarray:
        return self.ring_mask.sum(axis=1)

    @classmethod
    def from_mesh(cls, mesh: TriMesh, closed: bool = True) -> "Topology":
        n = mesh.n_vertices
        u, v, w = _directed_edge_table(mesh.faces)
        lo = np.minimum(u, v)
        hi = np.maximum(u, v)
        key = lo * n + hi
        order = np.lexsort((u > v, key))
        key_s = key[order]
        uniq, start, counts = np.unique(key_s, return_index=True, return_counts=True)
        if np.any(counts > 2):
            bad = uniq[counts > 2][0]
            raise MeshError(f"non-manifold edge ({bad // n}, {bad % n})")
        edges = np.stack([uniq // n, uniq % n], axis=1)
        # a repeated directed half-edge means inconsistent winding
        dup = (counts == 2) & ((u > v)[order][start] == (u > v)[order][np.minimum(start + 1, len(order) - 1)])
        if np.any(dup):
            bad = uniq[dup][0]
            raise MeshError(f"inconsistent face orientation at edge ({bad // n}, {bad % n})")
        opposite = np.full((len(edges), 2), -1, dtype=np.int64)
        first = order[start]
        opposite[:, 0] = w[first]
        two = counts == 2
        opposite[two, 1] = w[order[start[two] + 1]]
        # a boundary edge traversed j -> i keeps its single opposite in slot 0
        interior = two

        # one-rings from the undirected edge list
        nbr_a = np.concatenate([edges[:, 0], edges[:, 1]])
        nbr_b = np.concatenate([edges[:, 1], edges[:, 0]])
        o = np.lexsort((nbr_b, nbr_a))
        nbr_a, nbr_b = nbr_a[o], nbr_b[o]
        deg = np.bincount(nbr_a, minlength=n)
        width = int(deg.max(initial=0)) + (1 if closed else 0)
        rings = np.full((n, max(width, 1)), -1, dtype=np.int64)
        offs = np.concatenate([[0], np.cumsum(deg)[:-1]])
        slot = np.arange(len(nbr_a)) - offs[nbr_a]
        shift = 1 if closed else 0
        if closed:
            rings[:, 0] = np.arange(n)
        rings[nbr_a, slot + shift] = nbr_b
        mask = rings >= 0
        return cls(edges, opposite, interior, rings, mask, closed)

    def stencils(self) -> list[EdgeStencil]:
        out = []
        for (i, j), opp, inter in zip(self.edges.tolist(), self.opposite.tolist(), self.interior.tolist()):
            out.append(EdgeStencil((i, j), tuple(o for o in opp if o >= 0), bool(inter)))
        return out

    def one_rings(self) -> list[OneRing]:
        return [OneRing(c, tuple(int(k) for k in row[m]))
                for c, (row, m) in enumerate(zip(self.rings, self.ring_mask))]


def build_topology(mesh: TriMesh, closed: bool = True, min_ring: int = 0):
    """Return ``(stencils, rings)`` for a manifold mesh.

    ``min_ring`` enforces a minimum ring size (garment templates use 3).
    """
    topo = Topology.from_mesh(mesh, closed=closed)
    if min_ring:
        small = np.flatnonzero(topo.ring_sizes < min_ring)
        if len(small):
            raise MeshError(f"vertex {small[0]} has a one-ring of size {topo.ring_sizes[small[0]]} < {min_ring}")
    return topo.stencils(), topo.one_rings()
