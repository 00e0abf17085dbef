import hashlib

import numpy as np
import pytest

from drapekit.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from drapekit.fixtures import sphere_body
from drapekit.mesh import Topology, load_obj


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("assets")
    assert main(["make-fixtures", str(d), "--grid", "10", "--frames", "3"]) == EXIT_OK
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fixture_counts(assets):
    g = load_obj(assets / "grid_cloth.obj")
    assert (g.n_vertices, g.n_faces) == (100, 162)
    assert Topology.from_mesh(load_obj(assets / "sphere.obj")).n_boundary_edges == 0


def test_fixtures_regenerate_identically(assets, tmp_path, capsys):
    run(capsys, "make-fixtures", tmp_path, "--grid", 10, "--frames", 3)
    for f in assets.iterdir():
        if f.is_file():
            assert digest(f) == digest(tmp_path / f.name), f.name


def test_fixtures_reject_bad_grid(tmp_path, capsys):
    code, _, err = run(capsys, "make-fixtures", tmp_path, "--grid", 1)
    assert code == EXIT_USAGE and "--grid" in err


def test_precompute_byte_identical(assets, tmp_path, capsys):
    cfg = assets / "sphere_drop.cfg"
    a, b = tmp_path / "a.cache", tmp_path / "b.cache"
    assert run(capsys, "precompute", cfg, "--set", f"paths.rest_cache={a}",
               "--set", f"paths.output={tmp_path}")[0] == EXIT_OK
    assert run(capsys, "precompute", cfg, "--set", f"paths.rest_cache={b}",
               "--set", f"paths.output={tmp_path}")[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_missing_garment_names_key(assets, tmp_path, capsys):
    code, _, err = run(capsys, "simulate", assets / "sphere_drop.cfg", "--set", "paths.garment=nope.obj",
                       "--set", f"paths.output={tmp_path / 'out'}")
    assert code == EXIT_USAGE and "garment" in err
    # nothing is written when validation fails
    assert not (tmp_path / "out").exists()


def test_unknown_key_rejected(assets, tmp_path, capsys):
    code, _, err = run(capsys, "simulate", assets / "sphere_drop.cfg", "--set", "energy.stifness=3",
                       "--set", f"paths.output={tmp_path / 'out'}")
    assert code == EXIT_USAGE and "stifness" in err
    assert not (tmp_path / "out").exists()


def test_bad_value_rejected(assets, tmp_path, capsys):
    code, _, err = run(capsys, "simulate", assets / "sphere_drop.cfg", "--set", "energy.gravity=1 2",
                       "--set", f"paths.output={tmp_path / 'out'}")
    assert code == EXIT_USAGE and "gravity" in err


def test_weights_reports_deviation(assets, tmp_path, capsys):
    code, out, _ = run(capsys, "weights", assets / "skirt.cfg", "--set", f"paths.output={tmp_path}")
    assert code == EXIT_OK
    dev = float(out.split("max row-sum deviation:")[1])
    assert dev < 1e-6
    assert (tmp_path / "weights.txt").is_file()


def test_one_frame_without_forces_stays_at_template(assets, tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", assets / "sphere_drop.cfg", "--frames", 1,
                     "--set", "energy.gravity=0 0 0", "--set", f"paths.output={tmp_path}")
    assert code == EXIT_OK
    x = load_obj(tmp_path / "frame_0000.obj").vertices
    np.testing.assert_allclose(x, load_obj(assets / "grid_cloth.obj").vertices, atol=1e-9)
    csv = (tmp_path / "metrics.csv").read_text().splitlines()
    assert csv[0] == "frame,eps_e,eps_a,eps_c" and csv[1].startswith("0,")
    log = (tmp_path / "run.log").read_text()
    assert log.startswith("frame=0 iterations=") and "eps_c=" in log
    assert "[energy]" in (tmp_path / "resolved_config").read_text()


def test_simulate_deterministic(assets, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(capsys, "simulate", assets / "sphere_drop.cfg", "--frames", 2,
                   "--set", f"paths.output={out}")[0] == EXIT_OK
        outs.append(out)
    # resolved_config records the output path, so it is left out
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "resolved_config")
    assert names == sorted(p.name for p in outs[1].iterdir() if p.name != "resolved_config")
    assert "metrics.csv" in names and "frame_0001.obj" in names
    for n in names:
        assert digest(outs[0] / n) == digest(outs[1] / n), n


def test_metrics_recomputes_simulate_csv(assets, tmp_path, capsys):
    out = tmp_path / "sim"
    run(capsys, "simulate", assets / "sphere_drop.cfg", "--frames", 2, "--set", f"paths.output={out}")
    code, _, _ = run(capsys, "metrics", assets / "sphere_drop.cfg", "--set", f"paths.output={out}",
                     "--out", tmp_path / "again.csv")
    assert code == EXIT_OK
    a = np.genfromtxt(out / "metrics.csv", delimiter=",", skip_header=1, usecols=(1, 2, 3))
    b = np.genfromtxt(tmp_path / "again.csv", delimiter=",", skip_header=1, usecols=(1, 2, 3))
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)


def test_drape_writes_outputs(assets, tmp_path, capsys):
    code, out, _ = run(capsys, "drape", assets / "sphere_drop.cfg", "--set", f"paths.output={tmp_path}",
                       "--set", "solver.outer_iterations=2", "--set", "solver.max_iterations=5")
    assert code == EXIT_OK and "eps_c" in out
    assert load_obj(tmp_path / "drape.obj").n_vertices == 100
    assert len((tmp_path / "run.log").read_text().splitlines()) == 2


def test_drape_pose_out_of_range(assets, tmp_path, capsys):
    code, _, err = run(capsys, "drape", assets / "sphere_drop.cfg", "--pose", 99,
                       "--set", f"paths.output={tmp_path / 'o'}")
    assert code == EXIT_USAGE and "--pose" in err


def test_gradcheck_exit_codes(assets, capsys):
    code, out, _ = run(capsys, "gradcheck", assets / "sphere_drop.cfg", "--term", "gravity", "--trials", 3)
    assert code == EXIT_OK and "gravity" in out and "ok" in out
    code, out, _ = run(capsys, "gradcheck", assets / "sphere_drop.cfg", "--term", "strain", "--trials", 3,
                       "--tol", "1e-30")
    assert code == EXIT_NUMERICAL and "FAIL" in out


def test_help_lists_keys_with_units(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for token in ("collision_margin", "inext_weight", "max_iterations", "rbf_k", "Pa", "m/s^2"):
        assert token in out


def test_non_watertight_body_rejected(assets, tmp_path, capsys):
    mesh = sphere_body().mesh
    obj = tmp_path / "sphere.obj"
    lines = (assets / "sphere.obj").read_text().splitlines()
    faces = [i for i, ln in enumerate(lines) if ln.startswith("f ")]
    del lines[faces[0]]
    obj.write_text("\n".join(lines) + "\n")
    body = tmp_path / "sphere.body"
    body.write_text((assets / "sphere.body").read_text())
    assert mesh.n_faces == len(faces)
    code, _, err = run(capsys, "simulate", assets / "sphere_drop.cfg", "--set", f"paths.body={body}",
                       "--set", f"paths.output={tmp_path / 'out'}")
    assert code == EXIT_USAGE
    assert not (tmp_path / "out").exists()
