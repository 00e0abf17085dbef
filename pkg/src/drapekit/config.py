"""Run configuration: sectioned ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .energy import EnergyParams
from .skinning import SCHEMES
from .solver import SolverConfig


class ConfigError(ValueError):
    """Invalid, unknown or missing configuration entry."""


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: type
    unit: str
    help: str


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _vec3(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise ValueError(f"expected three numbers, got {text!r}")
    return tuple(float(p) for p in parts)


KEYS = [
    Key("paths", "garment", str, "path", "garment template OBJ"),
    Key("paths", "body", str, "path", "body file (mesh, skeleton, skinning weights)"),
    Key("paths", "poses", str, "path", "pose sequence, one frame per line"),
    Key("paths", "output", str, "path", "output directory"),
    Key("paths", "rest_cache", str, "path", "rest-state cache (default <output>/rest.cache)"),
    Key("paths", "weights_cache", str, "path", "garment weight cache (default <output>/weights.txt)"),
    Key("energy", "youngs_modulus", float, "Pa*m", "membrane Young's modulus"),
    Key("energy", "poisson_ratio", float, "1", "Poisson ratio"),
    Key("energy", "bending_stiffness", float, "N*m", "bending stiffness"),
    Key("energy", "collision_stiffness", float, "N/m^2", "cubic collision penalty stiffness"),
    Key("energy", "collision_margin", float, "m", "collision margin epsilon"),
    Key("energy", "inext_weight", float, "N/m^5", "inextensibility weight k_i"),
    Key("energy", "inext_smoothing", float, "1", "relative Huber width of |det| (0 = exact)"),
    Key("energy", "gravity", _vec3, "m/s^2", "gravity vector, three numbers"),
    Key("energy", "timestep", float, "s", "frame timestep"),
    Key("energy", "density", float, "kg/m^2", "areal density"),
    Key("energy", "kext_rate", float, "1/m", "extension factor rate per metre of penetration"),
    Key("energy", "kext_cap", float, "1", "cap on rate * depth"),
    Key("energy", "kext_ramp_cap", int, "frames", "cap on the ramp counter"),
    Key("energy", "closed_ring", _bool, "bool", "include the centre vertex in its one-ring"),
    Key("solver", "mode", str, "-", "dynamic | static"),
    Key("solver", "max_iterations", int, "count", "inner iterations per frame"),
    Key("solver", "outer_iterations", int, "count", "static mode outer iterations"),
    Key("solver", "grad_tolerance", float, "N", "largest per-vertex gradient norm at convergence"),
    Key("solver", "backtrack", float, "1", "line-search backtracking factor in (0, 1)"),
    Key("solver", "armijo", float, "1", "sufficient-decrease constant in (0, 1)"),
    Key("solver", "max_backtracks", int, "count", "line-search trials per iteration"),
    Key("solver", "max_step", float, "m", "per-vertex displacement cap of a trial step"),
    Key("solver", "memory", int, "count", "quasi-Newton history length"),
    Key("solver", "direction", str, "-", "lbfgs | gradient"),
    Key("solver", "schedule_kext", _bool, "bool", "use the penetration-driven extension schedule"),
    Key("skinning", "scheme", str, "-", "rbf | nearest | knn"),
    Key("skinning", "rbf_k", float, "1", "RBF width multiplier k"),
    Key("skinning", "knn_k", int, "count", "neighbour count for knn"),
    Key("metrics", "signed", _bool, "bool", "report signed mean deviations"),
]
_BY_NAME = {(k.section, k.name): k for k in KEYS}
_REQUIRED_PATHS = ("garment", "body", "poses", "output")


def keys_help() -> str:
    """One line per key with its unit, grouped by section."""
    lines = []
    for sec in dict.fromkeys(k.section for k in KEYS):
        lines.append(f"[{sec}]")
        for k in KEYS:
            if k.section == sec:
                lines.append(f"  {k.name:<20} [{k.unit}] {k.help}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    paths: dict
    energy: EnergyParams
    solver: SolverConfig
    scheme: str = "rbf"
    knn_k: int = 4
    signed: bool = False
    raw: dict = field(default_factory=dict)

    def path(self, key: str) -> Path:
        return Path(self.paths[key])

    def render(self) -> str:
        """Resolved configuration in the input file format."""
        out = []
        for sec in dict.fromkeys(k.section for k in KEYS):
            entries = [(name, v) for (s, name), v in sorted(self.raw.items()) if s == sec]
            if not entries:
                continue
            out.append(f"[{sec}]")
            out.extend(f"{name} = {v}" for name, v in entries)
            out.append("")
        return "\n".join(out)


def _resolve_key(key: str) -> Key:
    if "." in key:
        sec, name = key.split(".", 1)
        k = _BY_NAME.get((sec, name))
    else:
        hits = [k for k in KEYS if k.name == key]
        k = hits[0] if len(hits) == 1 else None
    if k is None:
        raise ConfigError(f"unknown config key {key!r}")
    return k


def load_config(path=None, overrides=(), need_paths=_REQUIRED_PATHS) -> RunConfig:
    """Parse, apply ``key=value`` overrides and validate.

    Relative paths are taken relative to the config file. ``need_paths``
    lists the path keys that must be present; input paths among them must
    exist.
    """
    raw = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        base = path.parent
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for sec in cp.sections():
            for name, value in cp.items(sec):
                if (sec, name) not in _BY_NAME:
                    raise ConfigError(f"unknown config key {sec}.{name!r}")
                raw[(sec, name)] = value.strip()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        k = _resolve_key(key.strip())
        raw[(k.section, k.name)] = value.strip()

    typed = {}
    for (sec, name), value in raw.items():
        k = _BY_NAME[(sec, name)]
        try:
            typed[(sec, name)] = k.kind(value)
        except ValueError as exc:
            raise ConfigError(f"{sec}.{name}: {exc}") from exc

    paths = {}
    for (sec, name), value in typed.items():
        if sec == "paths":
            p = Path(value)
            paths[name] = p if p.is_absolute() else base / p
    for name in need_paths:
        if name not in paths:
            raise ConfigError(f"missing required key paths.{name}")
        if name != "output" and not paths[name].exists():
            raise ConfigError(f"paths.{name}: file not found: {paths[name]}")
    if "output" in paths:
        paths.setdefault("rest_cache", paths["output"] / "rest.cache")
        paths.setdefault("weights_cache", paths["output"] / "weights.txt")

    def section(sec, cls):
        names = {f.name for f in fields(cls)}
        kw = {n: v for (s, n), v in typed.items() if s == sec and n in names}
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}] {exc}") from exc

    energy = section("energy", EnergyParams)
    if ("skinning", "rbf_k") in typed:
        energy.rbf_k = typed[("skinning", "rbf_k")]
    solver = section("solver", SolverConfig)
    scheme = typed.get(("skinning", "scheme"), "rbf")
    if scheme not in SCHEMES:
        raise ConfigError(f"skinning.scheme must be one of {SCHEMES}")
    knn_k = typed.get(("skinning", "knn_k"), 4)
    if knn_k < 1:
        raise ConfigError("skinning.knn_k must be >= 1")
    if energy.rbf_k <= 0:
        raise ConfigError("skinning.rbf_k must be > 0")
    resolved = dict(raw)
    for name, p in paths.items():
        resolved[("paths", name)] = str(p)
    return RunConfig(paths, energy, solver, scheme, knn_k, typed.get(("metrics", "signed"), False), resolved)
