"""Finite-difference verification of the analytic energy gradients.

Each trial draws a random perturbed garment state and a random direction
and compares the analytic directional derivative with a central
difference. Probes that straddle a non-smooth locus (a sign change of an
inextensibility determinant, the collision margin, a switch of closest
body feature, a dihedral near +-pi) are redrawn and counted as excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import BodySDF
from .energy import (EnergyParams, GarmentRestState, bending_energy, collision_energy, dihedral_angles,
                     gravity_energy, inertia_energy, inext_determinants, inext_energy, strain_energy)

TERMS = ("strain", "gravity", "collision", "bending", "inertia", "inext")
KINK_DISTANCE = 1e-5


@dataclass(frozen=True)
class TermReport:
    term: str
    max_error: float
    trials: int
    excluded: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.trials > 0 and self.max_error < tol


def _term(name, rest, params, sdf, x_prev, v_prev):
    if name == "strain":
        return lambda x: strain_energy(x, rest, params)
    if name == "gravity":
        return lambda x: gravity_energy(x, rest, params)
    if name == "bending":
        return lambda x: bending_energy(x, rest, params)
    if name == "inertia":
        return lambda x: inertia_energy(x, x_prev, v_prev, rest, params)
    if name == "inext":
        return lambda x: inext_energy(x, rest, 1.0, params.inext_weight, params.inext_smoothing)
    if name == "collision":
        return lambda x: collision_energy(x, sdf, params)[:2]
    raise ValueError(f"unknown term {name!r}")


def _near_kink(name, x, d, h, rest, params, sdf) -> bool:
    lo, hi = x - h * d, x + h * d
    if name == "inext":
        a, b = inext_determinants(lo, rest), inext_determinants(hi, rest)
        if params.inext_smoothing > 0.0:
            delta = params.inext_smoothing * rest.sigma[:, :1] ** 3
            a, b = np.abs(a) - delta, np.abs(b) - delta
        return bool(np.any(np.sign(a) != np.sign(b)))
    if name == "collision":
        eps = params.collision_margin
        da, _, na = sdf.query(lo)
        db, _, nb = sdf.query(hi)
        if np.any(np.abs(da - eps) < KINK_DISTANCE) or np.any(np.sign(da - eps) != np.sign(db - eps)):
            return True
        hit = (da < eps) | (db < eps)
        return bool(np.any(np.linalg.norm(na[hit] - nb[hit], axis=1) > 1e-2))
    if name == "bending":
        return bool(np.any(np.abs(dihedral_angles(x, rest)) > np.pi - KINK_DISTANCE))
    return False


def _state(name, rng, rest, params, sdf, scale):
    x = rest.template.vertices + rng.normal(scale=scale, size=rest.template.vertices.shape)
    if name != "collision":
        # body-free terms are translation invariant or linear; centring keeps
        # the energy small and the difference quotient free of cancellation
        return x - rest.template.vertices.mean(axis=0)
    # scatter vertices in a shell around the body so the penalty is active
    _, c, n = sdf.query(x)
    eps = params.collision_margin
    off = rng.uniform(-2.0 * eps, 1.5 * eps, size=len(x))
    return c + off[:, None] * n


def gradcheck(rest: GarmentRestState, params: EnergyParams, sdf: BodySDF | None = None,
              terms=TERMS, trials: int = 20, seed: int = 0, h: float = 1e-6,
              noise: float | None = None, max_draws: int = 50) -> dict[str, TermReport]:
    """Max relative error of analytic vs central-difference directional derivatives.

    ``noise`` is the std of the random state perturbation, defaulting to a
    fifth of the mean rest edge length.
    """
    rng = np.random.default_rng(seed)
    if noise is None:
        noise = 0.2 * float(np.mean(rest.edge_length))
    out = {}
    for name in terms:
        if name == "collision" and sdf is None:
            raise ValueError("collision gradcheck needs a body")
        worst, done, skipped = 0.0, 0, 0
        for _ in range(trials * max_draws):
            if done == trials:
                break
            x = _state(name, rng, rest, params, sdf, noise)
            x_prev = x + rng.normal(scale=noise, size=x.shape)
            v_prev = rng.normal(scale=noise / params.timestep, size=x.shape)
            fun = _term(name, rest, params, sdf, x_prev, v_prev)
            _, g = fun(x)
            r = rng.normal(size=x.shape)
            gn = np.linalg.norm(g)
            # mix in the gradient direction so the derivative is not accidentally tiny
            d = r / np.linalg.norm(r) + (g / gn if gn > 0 else 0.0)
            if _near_kink(name, x, d, h, rest, params, sdf):
                skipped += 1
                continue
            fd = (fun(x + h * d)[0] - fun(x - h * d)[0]) / (2.0 * h)
            an = float(np.sum(g * d))
            denom = max(abs(fd), abs(an))
            worst = max(worst, abs(fd - an) / denom if denom > 0.0 else 0.0)
            done += 1
        out[name] = TermReport(name, worst, done, skipped)
    return out
