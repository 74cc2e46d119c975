"""Experiment configuration: TOML for people, JSON for machines.

Both formats map onto the same nested dict, validated into an
:class:`ExperimentConfig`.  Errors carry the dotted path of the offending
field.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .drift import (
    DriftSpec,
    check_admissibility,
    euclidean_drift,
    polynomial_drift,
    singular_drift,
    smooth_drift,
    zero_drift,
)
from .fields import make_grid
from .groups import BUILTIN_GROUPS, CarnotGroupSpec, GroupSpecError, load_group

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENTS",
    "load_config",
    "parse_config",
    "validate",
    "list_scenarios",
    "scenario_path",
    "build_drift",
    "config_hash",
]

EXPERIMENTS = ("heat_checks", "kernel_scaling", "kolmogorov", "zvonkin_uniqueness", "krylov", "embedding")
DRIFT_KINDS = ("zero", "smooth", "singular", "polynomial", "euclidean")


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class ExperimentConfig:
    name: str
    experiment: str
    group: CarnotGroupSpec
    drift: DriftSpec
    T: float
    grid: dict
    solver: dict
    mc: dict
    params: dict
    output_dir: str
    description: str = ""
    raw: dict = field(default_factory=dict, repr=False)
    source: str | None = None

    @property
    def seed(self) -> int:
        return int(self.mc.get("seed", 0))

    def make_grid(self):
        g = self.group
        gp = self.grid
        return make_grid(g, self.T, float(gp.get("radius", self.drift.support_radius)), float(gp["h"]),
                         bounds=gp.get("bounds"), spacing=gp.get("spacing"), kappa=float(gp.get("kappa", 0.5)),
                         order=int(gp.get("order", 4)))


# ---------------------------------------------------------------------------
# loading


def scenario_dir():
    return resources.files("carnot_lab") / "scenarios"


def list_scenarios() -> list:
    out = []
    for entry in sorted(scenario_dir().iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".toml"):
            raw = tomllib.loads(entry.read_text())
            out.append({"name": raw.get("name", entry.name[:-5]), "experiment": raw.get("experiment"),
                        "description": raw.get("description", ""), "file": entry.name})
    return out


def scenario_path(name: str):
    cand = scenario_dir() / f"{name}.toml"
    if cand.is_file():
        return cand
    return None


def _read(source) -> tuple:
    if isinstance(source, dict):
        return copy.deepcopy(source), None
    path = Path(source)
    if not path.exists():
        builtin = scenario_path(str(source))
        if builtin is None:
            raise ConfigError("config", f"file not found: {path}")
        return tomllib.loads(builtin.read_text()), f"scenario:{source}"
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text), str(path)
        return tomllib.loads(text), str(path)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc


def load_config(source) -> ExperimentConfig:
    raw, origin = _read(source)
    base = Path(origin).parent if origin and not origin.startswith("scenario:") else Path.cwd()
    cfg = parse_config(raw, base)
    cfg.source = origin
    return cfg


def _num(section: dict, key: str, path: str, default=None, positive=False):
    if key not in section:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    v = section[key]
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        v = math.inf
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return float(v)


def _group(raw: dict, base: Path) -> CarnotGroupSpec:
    sec = raw.get("group")
    if sec is None:
        raise ConfigError("group", "missing required section")
    if isinstance(sec, str):
        sec = {"name": sec}
    try:
        if "path" in sec:
            p = Path(sec["path"])
            if not p.is_absolute():
                p = base / p
            return load_group(p)
        name = sec.get("name")
        if name not in BUILTIN_GROUPS:
            raise ConfigError("group.name", f"unknown group {name!r}; built-ins: {sorted(BUILTIN_GROUPS)}")
        return load_group(name)
    except FileNotFoundError as exc:
        raise ConfigError("group.path", str(exc)) from exc
    except GroupSpecError as exc:
        raise ConfigError("group", str(exc)) from exc


def build_drift(g: CarnotGroupSpec, sec: dict, path: str = "drift") -> DriftSpec:
    kind = sec.get("kind", "zero")
    if kind not in DRIFT_KINDS:
        raise ConfigError(f"{path}.kind", f"unknown drift kind {kind!r}; choose from {DRIFT_KINDS}")
    p = _num(sec, "p", path, math.inf if kind == "zero" else None)
    q = _num(sec, "q", path, math.inf if kind == "zero" else None)
    radius = _num(sec, "radius", path, 1.0, positive=True)
    plateau = _num(sec, "plateau", path, 0.5)
    center = sec.get("center")
    try:
        if kind == "zero":
            return zero_drift(g, p, q)
        if kind == "smooth":
            return smooth_drift(g, sec.get("direction", [1.0] + [0.0] * (g.m - 1)),
                                _num(sec, "amplitude", path, 1.0), radius, p, q, center, plateau)
        if kind == "singular":
            return singular_drift(g, _num(sec, "gamma", path), _num(sec, "rho", path, positive=True),
                                  _num(sec, "amplitude", path, 1.0), int(sec.get("component", 1)),
                                  radius, p, q, center, plateau)
        if kind == "polynomial":
            terms = [[(float(c), tuple(pw)) for c, pw in tl] for tl in sec["terms"]]
            return polynomial_drift(g, terms, radius, p, q, center, plateau)
        vec = np.asarray(sec.get("vector"), dtype=float)
        if vec.shape != (g.N,):
            raise ConfigError(f"{path}.vector", f"expected {g.N} Euclidean components")
        return _euclid(g, vec, radius, p, q, plateau)
    except ConfigError:
        raise
    except (ValueError, IndexError, KeyError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _euclid(g, vec, radius, p, q, plateau):
    from .drift import cutoff
    from .groups import homogeneous_norm

    def fn(t, x):
        x = np.asarray(x, dtype=float)
        return cutoff(homogeneous_norm(g, x) / radius, plateau)[..., None] * vec

    return euclidean_drift(g, fn, p, q, radius)


def parse_config(raw: dict, base: Path | None = None) -> ExperimentConfig:
    base = base or Path.cwd()
    name = raw.get("name", "experiment")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"expected one of {EXPERIMENTS}, got {exp!r}")
    g = _group(raw, base)
    drift = build_drift(g, raw.get("drift", {"kind": "zero"}))
    T = _num(raw.get("horizon", {}), "T", "horizon", 1.0, positive=True)
    grid = dict(raw.get("grid", {}))
    if "h" in grid:
        _num(grid, "h", "grid", positive=True)
    for key in ("bounds", "spacing"):
        if key in grid and len(grid[key]) != g.N:
            raise ConfigError(f"grid.{key}", f"expected {g.N} entries")
    mc = dict(raw.get("mc", {}))
    if "seed" in mc and not isinstance(mc["seed"], int):
        raise ConfigError("mc.seed", "seed must be an integer")
    for key in ("paths", "steps"):
        if key in mc and not (isinstance(mc[key], int) and mc[key] > 0):
            raise ConfigError(f"mc.{key}", "must be a positive integer")
    return ExperimentConfig(name, exp, g, drift, T, grid, dict(raw.get("solver", {})), mc,
                            dict(raw.get("params", {})), raw.get("output_dir", f"runs/{name}"),
                            raw.get("description", ""), copy.deepcopy(raw))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def validate(source) -> dict:
    """Static checks: config structure, group invariants and drift admissibility."""
    try:
        cfg = load_config(source)
    except ConfigError as exc:
        return {"valid": False, "errors": [str(exc)], "path": exc.path}
    errors = []
    grid = None
    if "h" in cfg.grid and cfg.group.N <= 3:
        try:
            grid = cfg.make_grid().with_time(cfg.T, 1)
        except (ValueError, TypeError) as exc:
            errors.append(f"grid: {exc}")
    report = check_admissibility(cfg.drift, cfg.group, grid,
                                 compute_norms=grid is not None and not cfg.drift.is_zero)
    if not cfg.drift.is_zero and not report.admissible:
        errors.extend(f"drift: {r}" for r in report.reasons)
    return {"valid": not errors, "errors": errors, "name": cfg.name, "experiment": cfg.experiment,
            "group": cfg.group.name, "Q": cfg.group.Q, "admissibility": _jsonable(report.to_dict())}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj
