"""Per-frame variational integration of the garment.

Each frame minimizes the total energy over unposed garment positions; world
positions are the blend-skinned image of those. Gradients are pulled back
through the per-vertex skinning maps. The minimizer is a limited-memory
quasi-Newton direction with Armijo backtracking, falling back to steepest
descent whenever the direction is not a descent direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .body import BodySDF, Pose, SkinnedBody, apply_affine, blend_transforms, pose_body
from .energy import (EnergyBreakdown, EnergyParams, GarmentRestState, collision_energy,
                     k_ext_schedule, total_energy)
from .skinning import GarmentWeights

log = logging.getLogger(__name__)

MODES = ("dynamic", "static")
DIRECTIONS = ("lbfgs", "gradient")


class NumericalError(RuntimeError):
    """Non-finite energy or gradient; the frame is aborted."""


@dataclass
class SolverConfig:
    max_iterations: int = 50
    grad_tolerance: float = 1e-6      # N, largest per-vertex gradient norm
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 40
    max_step: float = 0.02            # m, per-vertex displacement cap of a trial step
    memory: int = 8
    mode: str = "dynamic"
    outer_iterations: int = 60        # static mode only
    direction: str = "lbfgs"
    schedule_kext: bool = True

    def __post_init__(self):
        if self.grad_tolerance <= 0:
            raise ValueError("grad_tolerance must be > 0")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not 0.0 < self.armijo < 1.0:
            raise ValueError("armijo constant must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.max_iterations < 0 or self.outer_iterations < 1 or self.max_step <= 0:
            raise ValueError("iteration counts and max_step must be positive")


@dataclass
class StepInfo:
    iterations: int
    converged: bool
    line_search_failed: bool
    energy: EnergyBreakdown | None
    history: list = field(default_factory=list)


@dataclass
class SimState:
    x: np.ndarray                 # world positions (m)
    v: np.ndarray                 # world velocities (m/s)
    u: np.ndarray                 # unposed positions (m)
    frame: int = 0
    ramp: int = 0
    d_c: np.ndarray | None = None
    info: StepInfo | None = None

    def __post_init__(self):
        n = len(self.x)
        if self.v.shape != self.x.shape or self.u.shape != self.x.shape:
            raise ValueError("x, v and u must have equal shapes")
        if self.d_c is None:
            self.d_c = np.zeros(n)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise NumericalError("non-finite garment state")


@dataclass
class Pins:
    """Frozen unposed coordinates: ``indices`` rows are held at ``targets``."""

    indices: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.targets):
            raise ValueError("one target per pinned vertex")


def pin_constraints(x: np.ndarray, pins: Pins | None) -> np.ndarray:
    """Project pinned rows of ``x`` onto their targets (returns a copy)."""
    out = x.copy()
    if pins is not None and len(pins.indices):
        out[pins.indices] = pins.targets
    return out


def _max_row_norm(g: np.ndarray) -> float:
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", g, g), initial=0.0)))


def minimize(fun, u0: np.ndarray, cfg: SolverConfig, pins: Pins | None = None,
             metric: np.ndarray | None = None, h0: float = 1.0):
    """Minimize ``fun(u) -> (value, grad)`` from ``u0``.

    ``metric`` is a per-vertex diagonal preconditioner (e.g. inverse lumped
    mass); ``h0`` scales the very first step before curvature pairs exist.
    Returns ``(u, value, StepInfo)``; ``StepInfo.history`` holds the energy
    after every accepted step, starting with the initial value.
    """
    fixed = None
    if pins is not None and len(pins.indices):
        fixed = pins.indices
    u = pin_constraints(u0, pins)
    f, g = fun(u)
    if fixed is not None:
        g[fixed] = 0.0
    _check(f, g)
    hist = [f]
    S, Y = [], []
    Minv = None if metric is None else np.asarray(metric, dtype=np.float64).reshape(-1, 1)
    converged = failed = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if _max_row_norm(g) <= cfg.grad_tolerance:
            converged = True
            it -= 1
            break
        if cfg.direction == "lbfgs":
            d = _direction(g, S, Y, Minv, h0)
        else:
            d = -h0 * (g if Minv is None else Minv * g)
        slope = float(np.sum(g * d))
        if not slope < 0.0:
            S.clear()
            Y.clear()
            d = -h0 * (g if Minv is None else Minv * g)
            slope = float(np.sum(g * d))
        step = 1.0
        dmax = _max_row_norm(d)
        if dmax * step > cfg.max_step:
            step = cfg.max_step / dmax
        accepted = False
        for _ in range(cfg.max_backtracks):
            un = pin_constraints(u + step * d, pins)
            fn, gn = fun(un)
            if np.isfinite(fn) and fn <= f + cfg.armijo * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            failed = True
            log.debug("line search failed at iteration %d (f=%.6g)", it, f)
            break
        if fixed is not None:
            gn[fixed] = 0.0
        _check(fn, gn)
        s = un - u
        y = gn - g
        sy = float(np.sum(s * y))
        if sy > 1e-12 * float(np.sqrt(np.sum(s * s) * np.sum(y * y))):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        u, f, g = un, fn, gn
        hist.append(f)
    else:
        converged = _max_row_norm(g) <= cfg.grad_tolerance
    return u, f, StepInfo(it, converged, failed, None, hist)


def _check(f, g):
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("non-finite energy or gradient")


def _direction(g, S, Y, Minv=None, h0=1.0):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(np.sum(y * s))
        a = rho * float(np.sum(s * q))
        alphas.append((rho, a))
        q -= a * y
    if Minv is not None:
        if S:
            q *= float(np.sum(S[-1] * Y[-1])) / float(np.sum(Y[-1] * Minv * Y[-1]))
        else:
            q *= h0
        q *= Minv
    elif S:
        q *= float(np.sum(S[-1] * Y[-1])) / float(np.sum(Y[-1] * Y[-1]))
    else:
        q *= h0
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(np.sum(y * q))
        q += (a - b) * s
    return -q


class _Frame:
    """Posed body, skinning maps and the energy pulled back to unposed space."""

    def __init__(self, pose, rest, body, weights, params, k_ext, x_prev=None, v_prev=None, inertia=False,
                 sdf=None):
        self.rest = rest
        self.params = params
        self.k_ext = k_ext
        self.x_prev = x_prev
        self.v_prev = v_prev
        self.inertia = inertia
        self.sdf = sdf
        self.A = self.b = None
        if body is not None:
            if sdf is None:
                self.sdf = BodySDF(pose_body(body, pose) if pose is not None else body.mesh)
            if weights is not None and pose is not None:
                if weights.weights.shape != (rest.n_vertices, body.skeleton.n_joints):
                    raise ValueError("garment weights do not match garment/skeleton sizes")
                if np.any(pose.rotations) or np.any(pose.translation):
                    self.A, self.b = blend_transforms(weights.weights, body.skeleton, pose)

    def world(self, u):
        return u.copy() if self.A is None else apply_affine(self.A, self.b, u)

    def unpose(self, x, fallback):
        """Invert the per-vertex skinning maps; rows with a singular map keep ``fallback``."""
        if self.A is None:
            return x.copy()
        ok = np.abs(np.linalg.det(self.A)) > 1e-12
        u = fallback.copy()
        if np.any(ok):
            u[ok] = np.linalg.solve(self.A[ok], (x - self.b)[ok][..., None])[..., 0]
        return u

    def breakdown(self, u) -> EnergyBreakdown:
        return total_energy(self.world(u), self.rest, self.params, sdf=self.sdf, k_ext=self.k_ext,
                            x_prev=self.x_prev, v_prev=self.v_prev, inertia=self.inertia)

    def __call__(self, u):
        eb = self.breakdown(u)
        g = eb.gradient
        if self.A is not None:
            g = np.einsum("nba,nb->na", self.A, g)
        return eb.total, g

    def penetration(self, x):
        return collision_energy(x, self.sdf, self.params)[2]


def _kext(state: SimState, params: EnergyParams, cfg: SolverConfig):
    if not cfg.schedule_kext:
        return 1.0
    return k_ext_schedule(state.d_c, state.ramp, params.kext_rate, params.kext_cap, params.kext_ramp_cap)


def initial_state(template_u: np.ndarray, body: SkinnedBody | None = None,
                  weights: GarmentWeights | None = None, pose: Pose | None = None) -> SimState:
    u = np.array(template_u, dtype=np.float64)
    x = u.copy()
    if body is not None and weights is not None and pose is not None:
        A, b = blend_transforms(weights.weights, body.skeleton, pose)
        x = apply_affine(A, b, u)
    return SimState(x, np.zeros_like(x), u)


def step_frame(state: SimState, pose: Pose | None, rest: GarmentRestState, body: SkinnedBody | None,
               weights: GarmentWeights | None, params: EnergyParams, cfg: SolverConfig,
               pins: Pins | None = None) -> SimState:
    """Advance one frame of the dynamic integrator."""
    k_ext = _kext(state, params, cfg)
    frame = _Frame(pose, rest, body, weights, params, k_ext, state.x, state.v, inertia=True)
    # start from the inertial prediction, the minimizer of the inertia term alone
    u0 = frame.unpose(state.x + params.timestep * state.v, state.u)
    u, _, info = minimize(frame, u0, cfg, pins, 1.0 / rest.mass, params.timestep ** 2)
    info.energy = frame.breakdown(u)
    x = frame.world(u)
    v = (x - state.x) / params.timestep
    return SimState(x, v, u, state.frame + 1, state.ramp + 1, frame.penetration(x), info)


def static_drape(initial, pose: Pose | None, rest: GarmentRestState, body: SkinnedBody | None,
                 weights: GarmentWeights | None, params: EnergyParams, cfg: SolverConfig,
                 pins: Pins | None = None, callback=None) -> SimState:
    """Equilibrium drape without inertia.

    Runs ``cfg.outer_iterations`` inner minimizations; the extension factor
    is refreshed from the previous iterate's penetration between them.
    ``initial`` is either unposed positions or a ``SimState`` to continue
    from, in which case its ramp counter and penetration carry over.
    """
    probe = _Frame(pose, rest, body, weights, params, 1.0)
    if isinstance(initial, SimState):
        u = initial.u.copy()
        state = SimState(probe.world(u), np.zeros_like(u), u.copy(), initial.frame, initial.ramp,
                         initial.d_c.copy())
    else:
        u = np.array(initial, dtype=np.float64)
        state = SimState(probe.world(u), np.zeros_like(u), u.copy())
        state.d_c = probe.penetration(state.x)
    total = StepInfo(0, False, False, None, [])
    for outer in range(cfg.outer_iterations):
        frame = _Frame(pose, rest, body, weights, params, _kext(state, params, cfg), sdf=probe.sdf)
        u, _, info = minimize(frame, state.u, cfg, pins, 1.0 / rest.mass, params.timestep ** 2)
        x = frame.world(u)
        total.iterations += info.iterations
        total.history.append(info.history)
        total.converged = info.converged
        total.line_search_failed |= info.line_search_failed
        total.energy = frame.breakdown(u)
        state = SimState(x, np.zeros_like(x), u, state.frame, state.ramp + 1, frame.penetration(x), total)
        if callback is not None:
            callback(outer, state)
    return replace(state, info=total)
