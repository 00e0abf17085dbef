"""Edge, area and collision error metrics for draped garments."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .body import BodySDF
from .energy import GarmentRestState
from .mesh import TriMesh, face_areas


@dataclass(frozen=True)
class FrameMetrics:
    eps_e: float
    eps_a: float
    eps_c: float
    frame: int = 0


@dataclass
class SequenceMetrics:
    frames: list
    mean: dict
    std: dict


def frame_metrics(draped: TriMesh, rest: GarmentRestState, sdf: BodySDF | None = None,
                  frame: int = 0, signed: bool = False) -> FrameMetrics:
    """Mean percent edge/area deviation from the template and percent of
    vertices strictly inside the body.

    ``signed`` reports mean signed deviation instead of mean absolute deviation.
    """
    if draped.n_vertices != rest.n_vertices or not np.array_equal(draped.faces, rest.template.faces):
        raise ValueError("draped garment topology differs from the template")
    x = draped.vertices
    e = rest.topology.edges
    ln = np.linalg.norm(x[e[:, 1]] - x[e[:, 0]], axis=1)
    de = (ln - rest.edge_length) / rest.edge_length
    da = (face_areas(x, draped.faces) - rest.face_area) / rest.face_area
    if not signed:
        de, da = np.abs(de), np.abs(da)
    eps_e = 100.0 * float(np.mean(de)) if len(de) else 0.0
    eps_a = 100.0 * float(np.mean(da)) if len(da) else 0.0
    eps_c = 0.0
    if sdf is not None and len(x):
        d = sdf.query(x)[0]
        eps_c = 100.0 * np.count_nonzero(d < 0.0) / len(x)
    return FrameMetrics(eps_e, eps_a, eps_c, frame)


def sequence_metrics(frames) -> SequenceMetrics:
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    mean, std = {}, {}
    for key in ("eps_e", "eps_a", "eps_c"):
        vals = np.array([getattr(f, key) for f in frames])
        mean[key] = float(vals.mean())
        std[key] = float(vals.std())
    return SequenceMetrics(frames, mean, std)


def write_metrics_csv(seq: SequenceMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "eps_e", "eps_a", "eps_c"])
        for f in seq.frames:
            w.writerow([f.frame, f"{f.eps_e:.10g}", f"{f.eps_a:.10g}", f"{f.eps_c:.10g}"])
        w.writerow(["mean"] + [f"{seq.mean[k]:.10g}" for k in ("eps_e", "eps_a", "eps_c")])
        w.writerow(["std"] + [f"{seq.std[k]:.10g}" for k in ("eps_e", "eps_a", "eps_c")])


def read_metrics_csv(path) -> list[FrameMetrics]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["frame"] in ("mean", "std"):
                continue
            out.append(FrameMetrics(float(row["eps_e"]), float(row["eps_a"]), float(row["eps_c"]),
                                    int(row["frame"])))
    return out
