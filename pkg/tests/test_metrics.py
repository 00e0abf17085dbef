import numpy as np
import pytest

from conftest import random_rotation
from drapekit.body import BodySDF
from drapekit.energy import EnergyParams, precompute_rest
from drapekit.fixtures import grid_cloth, sphere_body
from drapekit.metrics import (FrameMetrics, frame_metrics, read_metrics_csv, sequence_metrics,
                              write_metrics_csv)


@pytest.fixture(scope="module")
def cloth():
    g = grid_cloth(10, 1.0, center=(0, 0, 3.0))
    return g, precompute_rest(g, None, EnergyParams())


def test_identity_is_zero(cloth):
    g, rest = cloth
    m = frame_metrics(g, rest, BodySDF(sphere_body().mesh))
    assert (m.eps_e, m.eps_a, m.eps_c) == (0.0, 0.0, 0.0)


def test_uniform_scale(cloth):
    g, rest = cloth
    m = frame_metrics(g.copy(1.05 * g.vertices), rest)
    assert m.eps_e == pytest.approx(5.0, abs=1e-9)
    assert m.eps_a == pytest.approx(10.25, abs=1e-9)


def test_signed_variant(cloth):
    g, rest = cloth
    m = frame_metrics(g.copy(0.9 * g.vertices), rest, signed=True)
    assert m.eps_e == pytest.approx(-10.0, abs=1e-9)
    assert m.eps_a == pytest.approx(-19.0, abs=1e-9)


def test_rigid_invariance(cloth, rng):
    g, rest = cloth
    x = g.vertices * 1.02 + rng.normal(scale=0.005, size=g.vertices.shape)
    base = frame_metrics(g.copy(x), rest)
    R = random_rotation(rng)
    moved = frame_metrics(g.copy(x @ R.T + rng.normal(size=3)), rest)
    assert moved.eps_e == pytest.approx(base.eps_e, rel=1e-9)
    assert moved.eps_a == pytest.approx(base.eps_a, rel=1e-9)


def test_half_inside(cloth):
    g, rest = cloth
    x = g.vertices.copy()
    n = len(x)
    x[: n // 2] = [0.0, 0.0, 0.0]
    m = frame_metrics(g.copy(x), rest, BodySDF(sphere_body().mesh))
    assert m.eps_c == 50.0


def test_margin_contact_is_not_collision(cloth):
    # vertices resting just outside the surface count as clean
    g, rest = cloth
    body = sphere_body().mesh
    sdf = BodySDF(body)
    d, c, nrm = sdf.query(g.vertices)
    m = frame_metrics(g.copy(c + 1e-6 * nrm), rest, sdf)
    assert m.eps_c == 0.0


def test_topology_mismatch(cloth):
    g, rest = cloth
    with pytest.raises(ValueError):
        frame_metrics(grid_cloth(9), rest)


def test_sequence_aggregates():
    one = sequence_metrics([FrameMetrics(1.0, 2.0, 3.0)])
    assert one.mean == {"eps_e": 1.0, "eps_a": 2.0, "eps_c": 3.0}
    assert one.std == {"eps_e": 0.0, "eps_a": 0.0, "eps_c": 0.0}
    two = sequence_metrics([FrameMetrics(0.0, 0.0, 0.0, 0), FrameMetrics(0.0, 0.0, 2.0, 1)])
    assert two.mean["eps_c"] == 1.0 and two.std["eps_c"] == 1.0
    const = sequence_metrics([FrameMetrics(0.5, 0.5, 0.5, k) for k in range(5)])
    assert all(v == 0.0 for v in const.std.values())
    with pytest.raises(ValueError):
        sequence_metrics([])


def test_csv_layout_and_round_trip(tmp_path):
    frames = [FrameMetrics(0.1 * k, 0.2 * k, 0.0, k) for k in range(3)]
    seq = sequence_metrics(frames)
    p = tmp_path / "m.csv"
    write_metrics_csv(seq, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "frame,eps_e,eps_a,eps_c"
    assert lines[-2].startswith("mean,") and lines[-1].startswith("std,")
    back = read_metrics_csv(p)
    assert [f.frame for f in back] == [0, 1, 2]
    np.testing.assert_allclose([f.eps_a for f in back], [f.eps_a for f in frames], rtol=1e-9)
    again = sequence_metrics(back)
    assert again.mean["eps_e"] == pytest.approx(seq.mean["eps_e"], rel=1e-9)
