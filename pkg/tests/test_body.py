from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from drapekit.body import (BodyError, BodySDF, Pose, Skeleton, SkinnedBody, load_body, load_poses,
                           pose_body, save_body, save_poses, winding_number)
from drapekit.fixtures import capsule_body, grid_cloth, sphere_body
from drapekit.mesh import Topology, TriMesh


def ray_parity_inside(tris, points, direction=(0.5773, 0.5774, 0.5775)):
    """Brute-force inside test: count ray/triangle crossings."""
    d = np.asarray(direction) / np.linalg.norm(direction)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    out = []
    for p in points:
        s = p - a
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.einsum("ij,ij->i", s, h) / det
            q = np.cross(s, e1)
            v = (q @ d) / det
            t = np.einsum("ij,ij->i", e2, q) / det
        hit = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        out.append(hit.sum() % 2 == 1)
    return np.array(out)


def pseudonormal_inside(mesh, points, closest, regions):
    """Angle-weighted pseudo-normal sign at the closest feature."""
    V, F = mesh.vertices, mesh.faces
    tri = V[F]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    vn = np.zeros_like(V)
    for k in range(3):
        e1 = tri[:, (k + 1) % 3] - tri[:, k]
        e2 = tri[:, (k + 2) % 3] - tri[:, k]
        ang = np.arccos(np.clip(np.einsum("ij,ij->i", e1, e2)
                                / np.linalg.norm(e1, axis=1) / np.linalg.norm(e2, axis=1), -1, 1))
        np.add.at(vn, F[:, k], ang[:, None] * fn)
    out = []
    for p, c in zip(points, closest):
        dist_v = np.linalg.norm(V - c, axis=1)
        iv = np.argmin(dist_v)
        if dist_v[iv] < 1e-9:
            n = vn[iv]
        else:
            # faces containing the closest point: edge -> two faces, face -> one
            bary_close = []
            for fi, t in enumerate(tri):
                nrm = fn[fi]
                if abs(np.dot(c - t[0], nrm)) > 1e-9:
                    continue
                m = np.array([t[1] - t[0], t[2] - t[0]]).T
                uv = np.linalg.lstsq(m, c - t[0], rcond=None)[0]
                if uv.min() > -1e-9 and uv.sum() < 1 + 1e-9:
                    bary_close.append(fi)
            n = fn[bary_close].sum(axis=0)
        out.append(np.dot(p - c, n) < 0)
    return np.array(out)


def chain():
    skel = Skeleton([-1, 0], [[0, 0, 0], [1, 0, 0]])
    mesh = TriMesh([[0.5, 0, 0], [2, 0, 0], [1.5, 0.2, 0.1]], [[0, 1, 2]])
    W = np.array([[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]])
    return SkinnedBody(mesh, skel, W)


def test_identity_pose_exact():
    b = capsule_body()
    out = pose_body(b, Pose.identity(2))
    assert np.array_equal(out.vertices, b.mesh.vertices)
    # the general path as well: an explicit near-zero rotation is still the identity map
    tiny = Pose([[0, 0, 0], [0, 0, 1e-300]], [0, 0, 0])
    np.testing.assert_allclose(pose_body(b, tiny).vertices, b.mesh.vertices, rtol=0, atol=1e-15)


def test_root_translation():
    b = capsule_body()
    t = np.array([0.3, -0.2, 1.5])
    out = pose_body(b, Pose(np.zeros((2, 3)), t))
    np.testing.assert_allclose(out.vertices, b.mesh.vertices + t, atol=1e-12)


def test_chain_rotation_about_child_joint():
    b = chain()
    pose = Pose([[0, 0, 0], [0, 0, np.pi / 2]], [0, 0, 0])
    out = pose_body(b, pose).vertices
    # (2,0,0) rotated 90 deg about z around joint (1,0,0) lands at (1,1,0)
    np.testing.assert_allclose(out[1], [1, 1, 0], atol=1e-12)
    np.testing.assert_allclose(out[0], [0.5, 0, 0], atol=1e-12)
    # blended vertex: convex combination of the two rigid images
    p = np.array([1.5, 0.2, 0.1])
    rigid1 = np.array([1 - 0.2, 0.5, 0.1])
    np.testing.assert_allclose(out[2], 0.3 * p + 0.7 * rigid1, atol=1e-12)


def test_commutes_with_root_rotation(rng):
    b = capsule_body()
    for _ in range(5):
        rot = rng.normal(size=(2, 3)) * 0.5
        trans = rng.normal(size=3)
        pose = Pose(rot, trans)
        R = random_rotation(rng)
        root = (Rotation.from_matrix(R) * Rotation.from_rotvec(rot[0])).as_rotvec()
        pose_r = Pose(np.vstack([root, rot[1:]]), trans)
        j0 = b.skeleton.joints[0]
        a = pose_body(b, pose).vertices
        expect = (a - j0 - trans) @ R.T + j0 + trans
        np.testing.assert_allclose(pose_body(b, pose_r).vertices, expect, atol=1e-9)


def test_bad_skeletons():
    with pytest.raises(BodyError):
        Skeleton([0, 0], np.zeros((2, 3)))
    with pytest.raises(BodyError):
        Skeleton([-1, 2, 1], np.zeros((3, 3)))
    with pytest.raises(BodyError):
        Pose([[np.nan, 0, 0]], [0, 0, 0])


def test_weight_rows_validated():
    m = TriMesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(BodyError):
        SkinnedBody(m, Skeleton([-1], [[0, 0, 0]]), np.full((3, 1), 0.9))


def test_sphere_center_and_outside():
    sdf = BodySDF(sphere_body().mesh)
    r = sdf.signed_distance([0, 0, 0])
    # inscribed faces of a 32 x 16 UV sphere sit within 1 - cos(pi/16) of the unit sphere
    assert r.distance == pytest.approx(-1.0, abs=1 - np.cos(np.pi / 16))
    r = sdf.signed_distance([2, 0, 0])
    assert r.distance == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(r.normal, [1, 0, 0], atol=1e-9)


def test_query_on_vertex_is_zero():
    m = sphere_body().mesh
    sdf = BodySDF(m)
    for v in m.vertices[::37]:
        assert abs(sdf.signed_distance(v).distance) < 1e-9


def test_result_invariants(rng):
    sdf = BodySDF(capsule_body().mesh)
    pts = rng.uniform(-0.4, 0.4, size=(500, 3)) + [0, 0, -0.4]
    d, c, n = sdf.query(pts)
    np.testing.assert_allclose(np.linalg.norm(c - pts, axis=1), np.abs(d), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("make", [sphere_body, capsule_body])
def test_sign_matches_ray_parity(make, rng):
    mesh = make().mesh
    lo, hi = mesh.vertices.min(0) - 0.2, mesh.vertices.max(0) + 0.2
    pts = rng.uniform(lo, hi, size=(1000, 3))
    d, _, _ = BodySDF(mesh).query(pts)
    assert np.array_equal(d < 0, ray_parity_inside(mesh.vertices[mesh.faces], pts))


def test_sign_matches_pseudonormal(rng):
    mesh = sphere_body(n_lon=12, n_lat=6).mesh
    pts = rng.uniform(-1.3, 1.3, size=(150, 3))
    d, c, _ = BodySDF(mesh).query(pts)
    assert np.array_equal(d < 0, pseudonormal_inside(mesh, pts, c, None))


def test_winding_mode_agrees_with_hybrid(rng):
    mesh = capsule_body().mesh
    pts = rng.uniform(-0.3, 0.3, size=(400, 3)) + [0, 0, -0.4]
    a = BodySDF(mesh).query(pts)
    b = BodySDF(mesh, sign_mode="winding").query(pts)
    np.testing.assert_array_equal(a[0], b[0])
    w = winding_number(mesh.vertices[mesh.faces], pts)
    assert np.all((np.abs(w) < 1e-6) | (np.abs(w - 1) < 1e-6))


def test_non_watertight_rejected():
    with pytest.raises(BodyError, match="watertight"):
        BodySDF(grid_cloth(4))


def test_sphere_fixture_watertight():
    assert Topology.from_mesh(sphere_body().mesh).n_boundary_edges == 0
    assert Topology.from_mesh(capsule_body().mesh).n_boundary_edges == 0


def test_concurrent_queries(rng):
    sdf = BodySDF(sphere_body().mesh)
    chunks = [rng.uniform(-1.5, 1.5, size=(200, 3)) for _ in range(8)]
    serial = [sdf.query(c)[0] for c in chunks]
    with ThreadPoolExecutor(4) as ex:
        par = list(ex.map(lambda c: sdf.query(c)[0], chunks))
    for a, b in zip(serial, par):
        assert np.array_equal(a, b)


def test_body_and_pose_files(tmp_path):
    from drapekit.mesh import save_obj
    b = capsule_body()
    save_obj(b.mesh, tmp_path / "cap.obj")
    save_body(b, tmp_path / "cap.body", "cap.obj")
    back = load_body(tmp_path / "cap.body")
    assert np.array_equal(back.weights, b.weights)
    assert np.array_equal(back.skeleton.parents, b.skeleton.parents)
    poses = [Pose(np.full((2, 3), 0.1 * k), [k, 0, 0]) for k in range(3)]
    save_poses(poses, tmp_path / "p.pose")
    got = load_poses(tmp_path / "p.pose", n_joints=2)
    assert len(got) == 3
    assert np.array_equal(got[2].rotations, poses[2].rotations)
    with pytest.raises(BodyError, match="joints"):
        load_poses(tmp_path / "p.pose", n_joints=3)
