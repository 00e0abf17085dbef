"""Cloth energies with analytic gradients.

Every term takes world-space garment positions ``x`` of shape (N, 3) and
returns ``(value, gradient)`` with the gradient shaped like ``x``. Reductions
use fixed-order numpy sums so repeated evaluations are bitwise identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodySDF
from .mesh import MeshError, Topology, TriMesh, face_areas


@dataclass
class EnergyParams:
    youngs_modulus: float = 200.0        # Pa*m (membrane)
    poisson_ratio: float = 0.3
    bending_stiffness: float = 1e-4      # N*m
    collision_stiffness: float = 1e5     # N/m^2 (cubic penalty)
    collision_margin: float = 0.004      # m
    inext_weight: float = 2e8
    rbf_k: float = 0.5
    gravity: tuple = (0.0, 0.0, -9.81)   # m/s^2
    timestep: float = 1.0 / 30.0         # s
    density: float = 0.2                 # kg/m^2
    kext_rate: float = 10.0              # 1/m
    kext_cap: float = 0.03
    kext_ramp_cap: int = 100
    closed_ring: bool = True
    inext_smoothing: float = 1e-3

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        for name in ("youngs_modulus", "bending_stiffness", "collision_stiffness",
                     "collision_margin", "inext_weight", "density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.timestep <= 0:
            raise ValueError("timestep must be > 0")
        if not -1.0 < self.poisson_ratio < 1.0:
            raise ValueError("poisson_ratio must lie in (-1, 1)")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        # plane stress
        return self.youngs_modulus * self.poisson_ratio / (1.0 - self.poisson_ratio ** 2)


@dataclass
class GarmentRestState:
    template: TriMesh
    topology: Topology
    sigma: np.ndarray          # (N, 3) descending
    dm_inv: np.ndarray         # (F, 2, 2)
    face_area: np.ndarray      # (F,)
    edge_length: np.ndarray    # (E,) all undirected edges
    bend_edges: np.ndarray     # (B, 4): i, j, opposite in i->j face, opposite in j->i face
    bend_length: np.ndarray    # (B,)
    bend_area: np.ndarray      # (B,) sum of both rest face areas
    theta_rest: np.ndarray     # (B,)
    alpha: np.ndarray          # (B,)
    mass: np.ndarray           # (N,)

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices


@dataclass
class EnergyBreakdown:
    strain: float
    gravity: float
    collision: float
    bending: float
    inertia: float
    inext: float
    gradient: np.ndarray
    total: float = field(init=False)

    TERMS = ("strain", "gravity", "collision", "bending", "inertia", "inext")

    def __post_init__(self):
        self.total = (self.strain + self.gravity + self.collision
                      + self.bending + self.inertia + self.inext)

    def terms(self) -> dict:
        return {t: getattr(self, t) for t in self.TERMS}


# -- helpers -----------------------------------------------------------------

def _scatter(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of ``vals`` (M, 3) into an (n, 3) array at ``idx``."""
    idx = idx.ravel()
    vals = vals.reshape(-1, 3)
    return np.stack([np.bincount(idx, weights=vals[:, k], minlength=n) for k in range(3)], axis=1)


def ring_covariance(x: np.ndarray, rings: np.ndarray, mask: np.ndarray):
    """Second-moment matrix of each padded one-ring about its mean.

    Returns ``(C, centered, counts)`` with ``centered`` zeroed on padding.
    """
    pts = x[np.where(mask, rings, 0)]
    cnt = mask.sum(axis=1).astype(np.float64)
    mean = (pts * mask[..., None]).sum(axis=1) / cnt[:, None]
    centered = (pts - mean[:, None, :]) * mask[..., None]
    C = np.einsum("nka,nkb->nab", centered, centered) / cnt[:, None, None]
    return C, centered, cnt


def _cofactor3(A: np.ndarray) -> np.ndarray:
    """Cofactor matrices of a batch of 3x3 matrices (d det / dA)."""
    c = np.empty_like(A)
    c[..., 0, 0] = A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1]
    c[..., 0, 1] = A[..., 1, 2] * A[..., 2, 0] - A[..., 1, 0] * A[..., 2, 2]
    c[..., 0, 2] = A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0]
    c[..., 1, 0] = A[..., 0, 2] * A[..., 2, 1] - A[..., 0, 1] * A[..., 2, 2]
    c[..., 1, 1] = A[..., 0, 0] * A[..., 2, 2] - A[..., 0, 2] * A[..., 2, 0]
    c[..., 1, 2] = A[..., 0, 1] * A[..., 2, 0] - A[..., 0, 0] * A[..., 2, 1]
    c[..., 2, 0] = A[..., 0, 1] * A[..., 1, 2] - A[..., 0, 2] * A[..., 1, 1]
    c[..., 2, 1] = A[..., 0, 2] * A[..., 1, 0] - A[..., 0, 0] * A[..., 1, 2]
    c[..., 2, 2] = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return c


def _dihedral(x0, x1, x2, x3):
    """Signed dihedral angle across edge x0-x1 with its gradient.

    x2 is opposite in face (x0, x1, x2), x3 in face (x1, x0, x3). The angle is
    zero for a flat, consistently oriented pair.
    """
    e = x1 - x0
    le = np.linalg.norm(e, axis=1)
    n1 = np.cross(x1 - x0, x2 - x0)
    n2 = np.cross(x0 - x1, x3 - x1)
    n1sq = np.einsum("ij,ij->i", n1, n1)
    n2sq = np.einsum("ij,ij->i", n2, n2)
    l1 = np.sqrt(n1sq)
    l2 = np.sqrt(n2sq)
    ehat = e / le[:, None]
    sin_t = np.einsum("ij,ij->i", np.cross(n1, n2), ehat) / (l1 * l2)
    cos_t = np.einsum("ij,ij->i", n1, n2) / (l1 * l2)
    theta = np.arctan2(sin_t, cos_t)

    a1 = n1 / n1sq[:, None]
    a2 = n2 / n2sq[:, None]
    g2 = -le[:, None] * a1
    g3 = -le[:, None] * a2
    t1_0 = np.einsum("ij,ij->i", x2 - x1, ehat)
    t2_0 = np.einsum("ij,ij->i", x3 - x1, ehat)
    t1_1 = np.einsum("ij,ij->i", x2 - x0, ehat)
    t2_1 = np.einsum("ij,ij->i", x3 - x0, ehat)
    g0 = -(t1_0[:, None] * a1 + t2_0[:, None] * a2)
    g1 = t1_1[:, None] * a1 + t2_1[:, None] * a2
    return theta, (g0, g1, g2, g3)


def _tangent_dm(v0, v1, v2):
    """2x2 rest edge matrices in an orthonormal frame of each triangle."""
    d1 = v1 - v0
    d2 = v2 - v0
    e1 = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    n = np.cross(d1, d2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    Dm = np.empty((len(v0), 2, 2))
    Dm[:, 0, 0] = np.einsum("ij,ij->i", d1, e1)
    Dm[:, 0, 1] = np.einsum("ij,ij->i", d2, e1)
    Dm[:, 1, 0] = 0.0
    Dm[:, 1, 1] = np.einsum("ij,ij->i", d2, e2)
    return Dm


# -- precomputation ----------------------------------------------------------

def precompute_rest(template: TriMesh, body_rest: TriMesh | None, params: EnergyParams,
                    alpha_override: dict | None = None) -> GarmentRestState:
    """Template-only quantities, computed once per template/body pair.

    ``alpha_override`` maps ``(i, j)`` edge keys (i < j) to replacement
    bending balance coefficients.
    """
    template.validate(require_area=True)
    topo = Topology.from_mesh(template, closed=params.closed_ring)
    sizes = topo.ring_sizes
    need = 3 if params.closed_ring else 2
    if np.any(sizes < need):
        bad = int(np.flatnonzero(sizes < need)[0])
        raise MeshError(f"vertex {bad} has a one-ring of size {sizes[bad]} < {need}")
    X = template.vertices
    C, _, _ = ring_covariance(X, topo.rings, topo.ring_mask)
    sig = np.linalg.svd(C, compute_uv=False)  # descending
    if np.any(sig[:, 0] <= 0.0):
        bad = int(np.flatnonzero(sig[:, 0] <= 0.0)[0])
        raise MeshError(f"rank-0 one-ring at vertex {bad}")

    F = template.faces
    area = face_areas(X, F)
    Dm = _tangent_dm(X[F[:, 0]], X[F[:, 1]], X[F[:, 2]])
    dm_inv = np.linalg.inv(Dm)

    mass = params.density * np.bincount(F.ravel(), weights=np.repeat(area / 3.0, 3), minlength=len(X))

    edge_len = np.linalg.norm(X[topo.edges[:, 1]] - X[topo.edges[:, 0]], axis=1)
    inner = topo.interior
    be = np.concatenate([topo.edges[inner], topo.opposite[inner]], axis=1)
    x0, x1, x2, x3 = (X[be[:, k]] for k in range(4))
    theta_r, _ = _dihedral(x0, x1, x2, x3)
    bl = edge_len[inner]
    ba = 0.5 * (np.linalg.norm(np.cross(x1 - x0, x2 - x0), axis=1)
                + np.linalg.norm(np.cross(x0 - x1, x3 - x1), axis=1))

    if body_rest is not None and len(be):
        sdf = BodySDF(body_rest)
        mid = 0.5 * (x0 + x1)
        dist = np.abs(sdf.query(mid)[0])
        top = dist.max()
        alpha = np.clip(dist / top, 0.0, 1.0) if top > 0 else np.ones(len(be))
    else:
        alpha = np.ones(len(be))
    if alpha_override:
        lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(be[:, :2].tolist())}
        for key, val in alpha_override.items():
            i, j = sorted(key)
            if (i, j) not in lookup:
                raise MeshError(f"alpha override for unknown interior edge ({i}, {j})")
            alpha[lookup[(i, j)]] = float(np.clip(val, 0.0, 1.0))

    return GarmentRestState(template, topo, sig, dm_inv, area, edge_len, be, bl, ba,
                            theta_r, alpha, mass)


# -- energy terms ------------------------------------------------------------

DET_NOISE = 1e-12


def _inext_parts(x, rest, k_ext):
    k_ext = np.broadcast_to(np.asarray(k_ext, dtype=np.float64), (len(x),))
    topo = rest.topology
    C, centered, cnt = ring_covariance(x, topo.rings, topo.ring_mask)
    shift = k_ext[:, None] * rest.sigma                              # (N, 3)
    A = C[:, None, :, :] - shift[:, :, None, None] * np.eye(3)      # (N, 3, 3, 3)
    cof = _cofactor3(A)
    det = np.einsum("nja,nja->nj", A[:, :, 0, :], cof[:, :, 0, :])
    return C, centered, cnt, shift, det, cof


def inext_determinants(x: np.ndarray, rest: GarmentRestState, k_ext=1.0) -> np.ndarray:
    """det(C - k_ext * sigma_j * I) per vertex and j, shape (N, 3)."""
    return _inext_parts(x, rest, k_ext)[4]


def inext_energy(x: np.ndarray, rest: GarmentRestState, k_ext, k_i: float, smoothing: float = 0.0):
    """Covariance-spectrum inextensibility term and its subgradient.

    With ``smoothing > 0`` each |det| is replaced by a Huber function whose
    quadratic zone has half-width ``smoothing * s**3``, ``s`` being the ring's
    extended rest scale ``k_ext * sigma_1``; ``smoothing = 0`` is the exact
    absolute value.
    """
    n = len(x)
    if k_i == 0.0:
        return 0.0, np.zeros_like(x)
    topo = rest.topology
    C, centered, cnt, shift, det, cof = _inext_parts(x, rest, k_ext)
    a = np.abs(det)
    if smoothing > 0.0:
        delta = smoothing * shift[:, :1] ** 3
        quad = a < delta
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.where(quad, det * det / (2.0 * delta), a - 0.5 * delta)
            dval = np.where(quad, det / delta, np.sign(det))
    else:
        val = a
        # determinants within rounding noise of zero take the zero subgradient
        scale = np.maximum(shift[:, :1], np.trace(C, axis1=1, axis2=2)[:, None] / 3.0)
        dval = np.where(a > DET_NOISE * scale ** 3, np.sign(det), 0.0)
    value = k_i * float(val.sum())
    G = k_i * np.einsum("nj,njab->nab", dval, cof)
    Gs = (G + np.transpose(G, (0, 2, 1))) / cnt[:, None, None]
    per = np.einsum("nab,nkb->nka", Gs, centered)
    grad = _scatter(n, np.where(topo.ring_mask, topo.rings, 0), per * topo.ring_mask[..., None])
    return value, grad


def naive_edge_energy(x: np.ndarray, rest: GarmentRestState):
    """Squared edge-length deviation summed over every one-ring (edges counted twice)."""
    e = rest.topology.edges
    d = x[e[:, 1]] - x[e[:, 0]]
    ln = np.linalg.norm(d, axis=1)
    r = rest.edge_length - ln
    value = 2.0 * float(np.sum(r * r))
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(ln[:, None] > 0, (-4.0 * r / ln)[:, None] * d, 0.0)
    grad = _scatter(len(x), np.stack([e[:, 1], e[:, 0]], axis=1), np.stack([g, -g], axis=1))
    return value, grad


def strain_energy(x: np.ndarray, rest: GarmentRestState, params: EnergyParams):
    """StVK membrane energy integrated over rest face areas."""
    mu, lam = params.mu, params.lam
    if mu == 0.0 and lam == 0.0:
        return 0.0, np.zeros_like(x)
    f = rest.template.faces
    x0 = x[f[:, 0]]
    Ds = np.stack([x[f[:, 1]] - x0, x[f[:, 2]] - x0], axis=2)        # (F, 3, 2)
    Fm = Ds @ rest.dm_inv
    E = 0.5 * (np.einsum("fka,fkb->fab", Fm, Fm) - np.eye(2))
    tr = E[:, 0, 0] + E[:, 1, 1]
    psi = mu * np.einsum("fab,fab->f", E, E) + 0.5 * lam * tr * tr
    value = float(np.sum(rest.face_area * psi))
    S = 2.0 * mu * E + lam * tr[:, None, None] * np.eye(2)
    P = Fm @ S
    H = rest.face_area[:, None, None] * (P @ np.transpose(rest.dm_inv, (0, 2, 1)))
    g1 = H[:, :, 0]
    g2 = H[:, :, 1]
    grad = _scatter(len(x), f, np.stack([-g1 - g2, g1, g2], axis=1))
    return value, grad


def gravity_energy(x: np.ndarray, rest: GarmentRestState, params: EnergyParams):
    g = np.asarray(params.gravity)
    value = -float(np.sum(rest.mass * (x @ g)))
    grad = -rest.mass[:, None] * g[None, :]
    return value, grad


def collision_energy(x: np.ndarray, sdf: BodySDF | None, params: EnergyParams, query=None):
    """Cubic penetration penalty. Returns ``(value, gradient, d_c)``.

    ``query`` may carry a precomputed ``(distance, closest, normal)`` triple.
    """
    n = len(x)
    if sdf is None:
        return 0.0, np.zeros_like(x), np.zeros(n)
    d, _, normal = sdf.query(x) if query is None else query
    dc = np.maximum(params.collision_margin - d, 0.0)
    if params.collision_stiffness == 0.0:
        return 0.0, np.zeros_like(x), dc
    kc = params.collision_stiffness
    value = float(np.sum(kc * dc ** 3))
    grad = (-3.0 * kc * dc * dc)[:, None] * normal
    return value, grad, dc


def dihedral_angles(x: np.ndarray, rest: GarmentRestState) -> np.ndarray:
    """Signed dihedral angle of every interior edge, in radians."""
    be = rest.bend_edges
    return _dihedral(x[be[:, 0]], x[be[:, 1]], x[be[:, 2]], x[be[:, 3]])[0]


def bending_energy(x: np.ndarray, rest: GarmentRestState, params: EnergyParams):
    kb = params.bending_stiffness
    be = rest.bend_edges
    if kb == 0.0 or len(be) == 0:
        return 0.0, np.zeros_like(x)
    theta, gs = _dihedral(x[be[:, 0]], x[be[:, 1]], x[be[:, 2]], x[be[:, 3]])
    coef = kb * rest.bend_length ** 2 / (8.0 * rest.bend_area)
    a = rest.alpha
    dth = theta - rest.theta_rest
    value = float(np.sum(coef * (a * dth * dth + (1.0 - a) * theta * theta)))
    dE = coef * 2.0 * (a * dth + (1.0 - a) * theta)
    grad = _scatter(len(x), be, np.stack([dE[:, None] * g for g in gs], axis=1))
    return value, grad


def inertia_energy(x: np.ndarray, x_prev: np.ndarray, v_prev: np.ndarray,
                   rest: GarmentRestState, params: EnergyParams):
    dt = params.timestep
    r = x - x_prev - dt * v_prev
    w = rest.mass / (dt * dt)
    value = 0.5 * float(np.sum(w * np.einsum("ij,ij->i", r, r)))
    return value, w[:, None] * r


def k_ext_schedule(d_c, ramp: int, rate: float = 10.0, cap: float = 0.03, ramp_cap: int = 100):
    d_c = np.asarray(d_c, dtype=np.float64)
    if np.any(d_c < 0) or ramp < 0:
        raise ValueError("penetration depths and ramp counter must be >= 0")
    return 1.0 + np.minimum(rate * d_c, cap) * min(ramp, ramp_cap)


def total_energy(x: np.ndarray, rest: GarmentRestState, params: EnergyParams, *,
                 sdf: BodySDF | None = None, k_ext=1.0, x_prev=None, v_prev=None,
                 inertia: bool = True) -> EnergyBreakdown:
    """All terms and their summed gradient.

    The inertia term is skipped when ``inertia`` is false or no previous
    state is supplied. Any term is switched off by zeroing its stiffness.
    """
    s, gs = strain_energy(x, rest, params)
    g, gg = gravity_energy(x, rest, params)
    c, gc, _ = collision_energy(x, sdf, params)
    b, gb = bending_energy(x, rest, params)
    if inertia and x_prev is not None:
        v0 = np.zeros_like(x) if v_prev is None else v_prev
        m, gm = inertia_energy(x, x_prev, v0, rest, params)
    else:
        m, gm = 0.0, np.zeros_like(x)
    i, gi = inext_energy(x, rest, k_ext, params.inext_weight, params.inext_smoothing)
    grad = gs + gg + gc + gb + gm + gi
    return EnergyBreakdown(s, g, c, b, m, i, grad)


# -- rest-state cache --------------------------------------------------------

_MAGIC = b"DRAPEREST"
_VERSION = 1
_ARRAYS = ("sigma", "dm_inv", "face_area", "edge_length", "bend_edges", "bend_length",
           "bend_area", "theta_rest", "alpha", "mass")


def fingerprint(template: TriMesh, body_rest: TriMesh | None, params: EnergyParams) -> str:
    h = hashlib.sha256()
    for a in (template.vertices, template.faces):
        h.update(np.ascontiguousarray(a).tobytes())
    if body_rest is not None:
        h.update(np.ascontiguousarray(body_rest.vertices).tobytes())
        h.update(np.ascontiguousarray(body_rest.faces).tobytes())
    h.update(json.dumps({"density": params.density, "closed_ring": params.closed_ring}).encode())
    return h.hexdigest()


def save_rest_state(rest: GarmentRestState, path, fp: str = "") -> None:
    """Binary cache: magic, version, JSON manifest length, manifest, raw arrays."""
    arrays = {"vertices": rest.template.vertices, "faces": rest.template.faces}
    arrays.update({k: getattr(rest, k) for k in _ARRAYS})
    manifest = {"fingerprint": fp, "closed_ring": rest.topology.closed, "arrays": []}
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        dtype = "<f8" if a.dtype.kind == "f" else "<i8"
        a = a.astype(dtype)
        manifest["arrays"].append({"name": name, "dtype": dtype, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_rest_state(path, expect_fingerprint: str | None = None) -> GarmentRestState:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a rest-state cache")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != _VERSION:
        raise ValueError(f"{path}: cache version {version}, expected {_VERSION}")
    off += 8
    manifest = json.loads(data[off:off + hlen])
    off += hlen
    if expect_fingerprint is not None and manifest["fingerprint"] != expect_fingerprint:
        raise ValueError(f"{path}: cache does not match the current template/body")
    arrays = {}
    for spec in manifest["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy()
        off += count * dt.itemsize
    template = TriMesh(arrays.pop("vertices"), arrays.pop("faces"))
    topo = Topology.from_mesh(template, closed=manifest["closed_ring"])
    return GarmentRestState(template, topo, **{k: arrays[k] for k in _ARRAYS})
