"""Procedural test assets: cloth grids, revolved bodies, a skirt ring, pose sequences."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .body import Pose, Skeleton, SkinnedBody, save_body, save_poses
from .mesh import TriMesh, save_obj


def grid_cloth(n: int, size: float = 1.0, center=(0.0, 0.0, 0.0), alternate: bool = True) -> TriMesh:
    """n x n vertex square in the xy plane, (n-1)^2 * 2 triangles."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    t = np.linspace(-0.5 * size, 0.5 * size, n)
    xx, yy = np.meshgrid(t, t)
    v = np.stack([xx.ravel(), yy.ravel(), np.zeros(n * n)], axis=1) + np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b = i * n + j, i * n + j + 1
            c, d = (i + 1) * n + j + 1, (i + 1) * n + j
            if alternate and (i + j) % 2:
                faces += [(a, b, d), (b, c, d)]
            else:
                faces += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(faces))


def revolve(profile, n_around: int) -> TriMesh:
    """Closed surface of revolution about z.

    ``profile`` lists (radius, z) from the top pole to the bottom pole; the
    first and last entries are the poles (radius 0).
    """
    prof = np.asarray(profile, dtype=np.float64)
    rings = prof[1:-1]
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    verts = [[0.0, 0.0, prof[0, 1]]]
    for r, z in rings:
        verts += np.stack([r * np.cos(phi), r * np.sin(phi), np.full(n_around, z)], axis=1).tolist()
    verts.append([0.0, 0.0, prof[-1, 1]])
    K = len(rings)
    bottom = 1 + K * n_around

    def ring(k, j):
        return 1 + k * n_around + (j % n_around)

    faces = [(0, ring(0, j), ring(0, j + 1)) for j in range(n_around)]
    for k in range(K - 1):
        for j in range(n_around):
            faces += [(ring(k, j), ring(k + 1, j), ring(k + 1, j + 1)),
                      (ring(k, j), ring(k + 1, j + 1), ring(k, j + 1))]
    faces += [(ring(K - 1, j), bottom, ring(K - 1, j + 1)) for j in range(n_around)]
    return TriMesh(np.array(verts), np.array(faces))


def uv_sphere(radius: float = 1.0, n_lon: int = 32, n_lat: int = 16, center=(0.0, 0.0, 0.0)) -> TriMesh:
    th = np.pi * np.arange(n_lat + 1) / n_lat
    prof = np.stack([radius * np.sin(th), radius * np.cos(th)], axis=1)
    prof[0, 0] = prof[-1, 0] = 0.0
    m = revolve(prof, n_lon)
    m.vertices += np.asarray(center, dtype=np.float64)
    return m


def capsule(radius: float = 0.1, length: float = 0.8, n_around: int = 24, n_cap: int = 6,
            n_body: int = 16) -> TriMesh:
    """Vertical capsule whose axis runs from z=0 down to z=-length."""
    th = 0.5 * np.pi * np.arange(n_cap + 1) / n_cap
    top = np.stack([radius * np.sin(th), radius * np.cos(th)], axis=1)
    zs = -length * np.arange(1, n_body) / n_body
    mid = np.stack([np.full(len(zs), radius), zs], axis=1)
    bot = np.stack([radius * np.cos(th), -length - radius * np.sin(th)], axis=1)
    prof = np.concatenate([top, mid, bot])
    prof[0, 0] = prof[-1, 0] = 0.0
    return revolve(prof, n_around)


def annulus(r_in: float, r_out: float, n_around: int = 48, n_radial: int = 10, z: float = 0.0) -> TriMesh:
    """Flat ring in the plane z = const, normals along +z."""
    rs = np.linspace(r_in, r_out, n_radial)
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    v = [[r * np.cos(p), r * np.sin(p), z] for r in rs for p in phi]
    faces = []
    for k in range(n_radial - 1):
        for j in range(n_around):
            a = k * n_around + j
            b = k * n_around + (j + 1) % n_around
            c = (k + 1) * n_around + (j + 1) % n_around
            d = (k + 1) * n_around + j
            faces += [(a, d, c), (a, c, b)]
    return TriMesh(np.array(v), np.array(faces))


def sphere_body(radius: float = 1.0, n_lon: int = 32, n_lat: int = 16) -> SkinnedBody:
    mesh = uv_sphere(radius, n_lon, n_lat)
    return SkinnedBody(mesh, Skeleton([-1], [[0.0, 0.0, 0.0]]), np.ones((mesh.n_vertices, 1)))


def capsule_body(radius: float = 0.1, length: float = 0.8, blend: float = 0.1) -> SkinnedBody:
    """Two-joint limb: joint 0 at the top, joint 1 at mid-length."""
    mesh = capsule(radius, length)
    knee = -0.5 * length
    z = mesh.vertices[:, 2]
    s = np.clip((knee + blend - z) / (2.0 * blend), 0.0, 1.0)
    w1 = s * s * (3.0 - 2.0 * s)
    W = np.stack([1.0 - w1, w1], axis=1)
    return SkinnedBody(mesh, Skeleton([-1, 0], [[0.0, 0.0, 0.0], [0.0, 0.0, knee]]), W)


def skirt(r_in: float = 0.13, r_out: float = 0.5, z: float = -0.3, n_around: int = 48,
          n_radial: int = 10) -> TriMesh:
    return annulus(r_in, r_out, n_around, n_radial, z)


def identity_poses(n_joints: int, n_frames: int) -> list[Pose]:
    return [Pose.identity(n_joints) for _ in range(n_frames)]


def root_drop_poses(n_joints: int, n_frames: int, drop: float = 0.1) -> list[Pose]:
    return [Pose(np.zeros((n_joints, 3)), [0.0, 0.0, -drop * f / max(n_frames - 1, 1)])
            for f in range(n_frames)]


def limb_swing_poses(n_frames: int, amplitude: float = 0.6, period: int = 30) -> list[Pose]:
    out = []
    for f in range(n_frames):
        rot = np.zeros((2, 3))
        rot[1, 0] = amplitude * np.sin(2.0 * np.pi * f / period)
        out.append(Pose(rot, np.zeros(3)))
    return out


# stiffnesses are sized for the 2 m grid(30) cloth; one static pass of 50 iterations per frame
SPHERE_DROP_CONFIG = """\
[paths]
garment = grid_cloth.obj
body = sphere.body
poses = sphere_identity.pose
output = out_sphere_drop

[energy]
youngs_modulus = 2000
poisson_ratio = 0.3
bending_stiffness = 1e-4
collision_stiffness = 3e3
collision_margin = 0.002
inext_weight = 2e6
inext_smoothing = 1e-2
density = 0.2
timestep = 0.0333333333333333

[solver]
mode = static
outer_iterations = 1
max_iterations = 50

[skinning]
scheme = rbf
rbf_k = 0.5
"""

SKIRT_CONFIG = """\
[paths]
garment = skirt.obj
body = capsule.body
poses = limb_swing.pose
output = out_skirt

[solver]
mode = dynamic
max_iterations = 30

[skinning]
scheme = rbf
rbf_k = 0.5
"""


def sphere_drop_cloth(n: int = 30, size: float = 2.0, height: float = 1.05) -> TriMesh:
    return grid_cloth(n, size, center=(0.0, 0.0, height))


def make_fixtures(out_dir, grid_n: int = 30, n_frames: int = 60) -> list[Path]:
    """Write the standard asset set; output is a pure function of the arguments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def obj(mesh, name):
        save_obj(mesh, out / name)
        written.append(out / name)

    obj(sphere_drop_cloth(grid_n), "grid_cloth.obj")
    sb = sphere_body()
    obj(sb.mesh, "sphere.obj")
    save_body(sb, out / "sphere.body", "sphere.obj")
    cb = capsule_body()
    obj(cb.mesh, "capsule.obj")
    save_body(cb, out / "capsule.body", "capsule.obj")
    obj(skirt(), "skirt.obj")
    written += [out / "sphere.body", out / "capsule.body"]
    for name, poses in (("sphere_identity.pose", identity_poses(1, n_frames)),
                        ("identity.pose", identity_poses(2, n_frames)),
                        ("root_drop.pose", root_drop_poses(2, n_frames)),
                        ("limb_swing.pose", limb_swing_poses(n_frames))):
        save_poses(poses, out / name)
        written.append(out / name)
    for name, text in (("sphere_drop.cfg", SPHERE_DROP_CONFIG), ("skirt.cfg", SKIRT_CONFIG)):
        (out / name).write_text(text)
        written.append(out / name)
    return written
