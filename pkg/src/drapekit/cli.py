"""Command-line entry point: ``drapekit <subcommand> ...``.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
``DRAPEKIT_NUM_THREADS`` caps the BLAS/OpenMP thread pools; it only takes
effect when set before numpy is first imported in the process.
"""

from __future__ import annotations

import os

_threads = os.environ.get("DRAPEKIT_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .body import BodyError, BodySDF, load_body, load_poses, pose_body  # noqa: E402
from .config import ConfigError, RunConfig, keys_help, load_config  # noqa: E402
from .energy import (EnergyBreakdown, fingerprint, load_rest_state, precompute_rest,  # noqa: E402
                     save_rest_state)
from .fixtures import make_fixtures  # noqa: E402
from .gradcheck import TERMS, gradcheck  # noqa: E402
from .mesh import MeshError, TriMesh, load_obj, save_obj  # noqa: E402
from .metrics import frame_metrics, sequence_metrics, write_metrics_csv  # noqa: E402
from .skinning import SkinningError, compute_weights, save_weights  # noqa: E402
from .solver import NumericalError, initial_state, static_drape, step_frame  # noqa: E402

log = logging.getLogger("drapekit")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class _Inputs:
    """Everything a run reads, loaded and cross-checked before any output is written."""

    def __init__(self, cfg: RunConfig, need_poses: bool = True):
        self.cfg = cfg
        self.garment = load_obj(cfg.path("garment"))
        self.garment.validate(require_area=True)
        self.body = load_body(cfg.path("body"))
        self.poses = load_poses(cfg.path("poses"), self.body.skeleton.n_joints) if need_poses else []
        if need_poses and not self.poses:
            raise BodyError(f"{cfg.path('poses')}: empty pose sequence")
        self.sdf_rest = BodySDF(self.body.mesh)      # raises on a non-watertight body


def _rest(inp: _Inputs):
    cfg = inp.cfg
    fp = fingerprint(inp.garment, inp.body.mesh, cfg.energy)
    cache = cfg.path("rest_cache")
    if cache.is_file():
        try:
            return load_rest_state(cache, fp)
        except ValueError:
            log.info("rest cache %s is stale; recomputing", cache)
    return precompute_rest(inp.garment, inp.body.mesh, cfg.energy)


def _weights(inp: _Inputs):
    cfg = inp.cfg
    return compute_weights(cfg.scheme, inp.garment, inp.body.mesh, inp.body.weights,
                           k=cfg.energy.rbf_k, K=cfg.knn_k)


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.path("output")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config").write_text(cfg.render())
    return out


def _log_line(frame: int, iterations: int, eb: EnergyBreakdown, eps_c: float) -> str:
    terms = " ".join(f"{k}={v:.10g}" for k, v in eb.terms().items())
    return f"frame={frame} iterations={iterations} total={eb.total:.10g} {terms} eps_c={eps_c:.10g}\n"


def cmd_precompute(args) -> int:
    cfg = load_config(args.config, args.set, need_paths=("garment", "body", "output"))
    inp = _Inputs(cfg, need_poses=False)
    rest = precompute_rest(inp.garment, inp.body.mesh, cfg.energy)
    cfg.path("output").mkdir(parents=True, exist_ok=True)
    path = cfg.path("rest_cache")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_rest_state(rest, path, fingerprint(inp.garment, inp.body.mesh, cfg.energy))
    print(f"rest state: {rest.n_vertices} vertices, {len(rest.bend_edges)} bending edges -> {path}")
    return EXIT_OK


def cmd_weights(args) -> int:
    cfg = load_config(args.config, args.set, need_paths=("garment", "body", "output"))
    inp = _Inputs(cfg, need_poses=False)
    gw = _weights(inp)
    path = cfg.path("weights_cache")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(gw, path)
    print(f"{gw.scheme} weights -> {path}")
    print(f"max row-sum deviation: {gw.max_row_deviation():.3e}")
    return EXIT_OK


def _write_frame(out: Path, idx: int, mesh: TriMesh, x: np.ndarray) -> None:
    save_obj(mesh.copy(x), out / f"frame_{idx:04d}.obj")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    inp = _Inputs(cfg)
    poses = inp.poses if args.frames is None else inp.poses[:args.frames]
    rest = _rest(inp)
    gw = _weights(inp)
    out = _prepare_output(cfg)
    state = initial_state(inp.garment.vertices, inp.body, gw, poses[0])
    frames = []
    with open(out / "run.log", "w") as fh:
        for idx, pose in enumerate(poses):
            if cfg.solver.mode == "static":
                state = static_drape(state, pose, rest, inp.body, gw, cfg.energy, cfg.solver)
            else:
                state = step_frame(state, pose, rest, inp.body, gw, cfg.energy, cfg.solver)
            sdf = BodySDF(pose_body(inp.body, pose))
            m = frame_metrics(inp.garment.copy(state.x), rest, sdf, frame=idx, signed=cfg.signed)
            frames.append(m)
            _write_frame(out, idx, inp.garment, state.x)
            fh.write(_log_line(idx, state.info.iterations, state.info.energy, m.eps_c))
            fh.flush()
            log.info("frame %d: %d iterations, eps_c %.3f%%", idx, state.info.iterations, m.eps_c)
    seq = sequence_metrics(frames)
    write_metrics_csv(seq, out / "metrics.csv")
    last = frames[-1]
    print(f"{len(frames)} frames -> {out}")
    print(f"final frame: eps_e {last.eps_e:.4f}%  eps_a {last.eps_a:.4f}%  eps_c {last.eps_c:.4f}%")
    return EXIT_OK


def cmd_drape(args) -> int:
    cfg = load_config(args.config, args.set)
    inp = _Inputs(cfg)
    idx = 0 if args.pose is None else args.pose
    if not 0 <= idx < len(inp.poses):
        raise ConfigError(f"--pose {idx} out of range (sequence has {len(inp.poses)} poses)")
    pose = inp.poses[idx]
    sdf = BodySDF(pose_body(inp.body, pose))
    rest = _rest(inp)
    gw = _weights(inp)
    out = _prepare_output(cfg)
    u0 = inp.garment.vertices
    with open(out / "run.log", "w") as fh:
        def report(outer, st):
            eps_c = frame_metrics(inp.garment.copy(st.x), rest, sdf).eps_c
            fh.write(_log_line(outer, st.info.iterations, st.info.energy, eps_c))
            fh.flush()
        state = static_drape(u0, pose, rest, inp.body, gw, cfg.energy, cfg.solver, callback=report)
    m = frame_metrics(inp.garment.copy(state.x), rest, sdf, signed=cfg.signed)
    save_obj(inp.garment.copy(state.x), out / "drape.obj")
    write_metrics_csv(sequence_metrics([m]), out / "metrics.csv")
    print(f"drape -> {out / 'drape.obj'}")
    print(f"eps_e {m.eps_e:.4f}%  eps_a {m.eps_a:.4f}%  eps_c {m.eps_c:.4f}%")
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = load_config(args.config, args.set)
    inp = _Inputs(cfg)
    rest = precompute_rest(inp.garment, None, cfg.energy)
    src = Path(args.frames_dir) if args.frames_dir else cfg.path("output")
    files = sorted(src.glob("frame_*.obj"))
    if not files:
        raise ConfigError(f"no frame_*.obj files in {src}")
    frames = []
    for f in files:
        idx = int(f.stem.split("_")[1])
        if idx >= len(inp.poses):
            raise ConfigError(f"{f.name}: no pose for frame {idx}")
        sdf = BodySDF(pose_body(inp.body, inp.poses[idx]))
        frames.append(frame_metrics(load_obj(f), rest, sdf, frame=idx, signed=cfg.signed))
    seq = sequence_metrics(frames)
    dest = Path(args.out) if args.out else src / "metrics.csv"
    write_metrics_csv(seq, dest)
    print(f"{len(frames)} frames -> {dest}")
    print("mean: " + "  ".join(f"{k} {v:.4f}%" for k, v in seq.mean.items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.set, need_paths=("garment", "body"))
    inp = _Inputs(cfg, need_poses=False)
    terms = TERMS if args.term == "all" else (args.term,)
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    rest = precompute_rest(inp.garment, inp.body.mesh, cfg.energy)
    rep = gradcheck(rest, cfg.energy, inp.sdf_rest, terms=terms, trials=args.trials, seed=args.seed)
    ok = True
    for r in rep.values():
        flag = "ok" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{r.term:<10} max_rel_error {r.max_error:.3e}  trials {r.trials}  excluded {r.excluded}  {flag}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_make_fixtures(args) -> int:
    if args.grid < 2 or args.frames < 1:
        raise ConfigError("--grid must be >= 2 and --frames >= 1")
    for p in make_fixtures(args.out_dir, grid_n=args.grid, n_frames=args.frames):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drapekit", description="Physics-based garment draping with collision-aware inextensibility.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (set in the file or with --set section.key=value):\n" + keys_help()
        + "\n\nenvironment: DRAPEKIT_NUM_THREADS caps BLAS/OpenMP threads.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog="config keys:\n" + keys_help())
        p.add_argument("config", help="run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.set_defaults(func=func)
        return p

    with_config("precompute", cmd_precompute, "compute and cache the garment rest state")
    with_config("weights", cmd_weights, "compute and cache garment skinning weights")
    p = with_config("drape", cmd_drape, "static equilibrium drape for one pose")
    p.add_argument("--pose", type=int, default=None, help="pose index (default 0)")
    p = with_config("simulate", cmd_simulate, "dynamic simulation over the pose sequence")
    p.add_argument("--frames", type=int, default=None, help="limit the number of frames")
    p = with_config("metrics", cmd_metrics, "recompute error metrics from frame OBJs")
    p.add_argument("--frames-dir", default=None, help="directory of frame_XXXX.obj (default: output)")
    p.add_argument("--out", default=None, help="CSV destination (default: <frames-dir>/metrics.csv)")
    p = with_config("gradcheck", cmd_gradcheck, "finite-difference check of energy gradients")
    p.add_argument("--term", choices=TERMS + ("all",), default="all")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("make-fixtures", help="write the synthetic test assets")
    p.add_argument("out_dir")
    p.add_argument("--grid", type=int, default=30, help="grid cloth resolution (vertices per side)")
    p.add_argument("--frames", type=int, default=60, help="pose sequence length")
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError, BodyError, SkinningError, FileNotFoundError) as exc:
        print(f"drapekit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"drapekit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
