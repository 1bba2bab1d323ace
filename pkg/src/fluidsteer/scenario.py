"""Scenario files: schema, validation with collected errors, and serialization.

A scenario is TOML or JSON with sections ``domain``, ``body`` (array),
``target``, ``vorticity``, ``mode``, ``numerics`` and ``output``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .geometry import BodyShape, ClosedCurve, DomainSpec


class ScenarioError(ValueError):
    """Validation failed; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class DomainConfig:
    radius: float | None = 1.0
    vertices: tuple[tuple[float, float], ...] | None = None
    sigma: tuple[float, float] = (0.0, 0.9)

    def build(self) -> DomainSpec:
        outer = ClosedCurve.polygon(self.vertices) if self.vertices else ClosedCurve.circle(self.radius)
        return DomainSpec(outer, self.sigma)


@dataclass(frozen=True)
class BodyConfig:
    shape: str = "ellipse"
    a: float | None = None
    b: float | None = None
    vertices: tuple[tuple[float, float], ...] | None = None
    mass: float = 1.0
    inertia: float = 0.05
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] | None = None

    def build(self) -> BodyShape:
        curve = ClosedCurve.ellipse(self.a, self.b) if self.shape == "ellipse" else ClosedCurve.polygon(self.vertices)
        return BodyShape(curve, self.mass, self.inertia)


@dataclass(frozen=True)
class TargetConfig:
    times: tuple[float, ...] = (0.0, 1.0)
    poses: tuple[tuple[float, ...], ...] = ()
    spline: str = "quintic"


@dataclass(frozen=True)
class VorticityConfig:
    particles: tuple[tuple[float, float, float], ...] = ()
    blob_radius: float | None = None
    bound: float | None = None


@dataclass(frozen=True)
class ModeConfig:
    kind: str = "exact"
    kp: tuple[tuple[float, ...], ...] | None = None
    kd: tuple[tuple[float, ...], ...] | None = None


@dataclass(frozen=True)
class NumericsConfig:
    dt: float = 5e-4
    resolution: float = 20.0
    n_modes: int | None = None
    cutoff: float = 1e-6
    nu: float = 0.2
    delta: float = 0.05
    tol: float = 1e-8
    eps0: float = 0.1
    cache_threshold: float = 0.02
    max_iter: int = 100
    refine_iter: int = 30
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    report: str = "report.csv"
    interval: int = 1
    plots: bool = False
    control_dump: bool = False
    dump_forces: bool = False
    particle_interval: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    domain: DomainConfig
    bodies: tuple[BodyConfig, ...]
    target: TargetConfig
    gamma: tuple[float, ...] = ()
    vorticity: VorticityConfig = field(default_factory=VorticityConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    def initial_pose(self) -> np.ndarray:
        return np.concatenate([np.asarray(b.pose, dtype=float) for b in self.bodies])

    def initial_velocity(self) -> np.ndarray | None:
        if all(b.velocity is None for b in self.bodies):
            return None
        return np.concatenate([np.asarray(b.velocity if b.velocity is not None else (0.0, 0.0, 0.0), dtype=float)
                               for b in self.bodies])

    def gains(self) -> tuple[np.ndarray, np.ndarray]:
        return _gain_matrix(self.mode.kp, 3 * self.n_bodies), _gain_matrix(self.mode.kd, 3 * self.n_bodies)

    def to_dict(self) -> dict[str, Any]:
        return _strip_none(to_plain(self))

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _gain_matrix(value, n: int) -> np.ndarray:
    if value is None:
        return np.zeros((n, n))
    arr = np.asarray(value, dtype=float)
    return arr * np.eye(n) if arr.ndim == 0 or arr.size == 1 and arr.ndim <= 1 else arr


def to_plain(obj) -> Any:
    if hasattr(obj, "__dataclass_fields__"):
        out = {}
        for f in fields(obj):
            key = "body" if f.name == "bodies" else f.name
            out[key] = to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _num(errors: list[str], where: str, value, positive: bool = False, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{where}: expected a number, got {value!r}")
        return None
    if integer and int(value) != value:
        errors.append(f"{where}: expected an integer, got {value!r}")
        return None
    if not np.isfinite(value):
        errors.append(f"{where}: must be finite")
        return None
    if positive and value <= 0:
        errors.append(f"{where}: must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _section(cls, raw: dict | None, where: str, errors: list[str], positive=(), integers=()):
    raw = dict(raw or {})
    names = {f.name for f in fields(cls)}
    for key in sorted(set(raw) - names):
        errors.append(f"{where}: unknown key '{key}'")
        raw.pop(key)
    for key in list(raw):
        default = next(f.default for f in fields(cls) if f.name == key)
        val = raw[key]
        if isinstance(default, bool):
            if not isinstance(val, bool):
                errors.append(f"{where}.{key}: expected true/false")
            continue
        if isinstance(default, (int, float)) or key in positive or key in integers:
            if val is None:
                continue
            raw[key] = _num(errors, f"{where}.{key}", val, key in positive, key in integers)
        else:
            raw[key] = _tuplify(val)
    return cls(**raw)


def _check_matrix(errors: list[str], name: str, value, n: int) -> None:
    if value is None:
        errors.append(f"mode.{name}: required for pd mode")
        return
    try:
        K = _gain_matrix(value, n)
    except (TypeError, ValueError):
        errors.append(f"mode.{name}: not a number or matrix")
        return
    if K.shape != (n, n):
        errors.append(f"mode.{name}: expected {n}x{n}, got {K.shape}")
        return
    if not np.allclose(K, K.T):
        errors.append(f"mode.{name}: matrix is not symmetric")
        return
    lo = float(np.linalg.eigvalsh(K).min())
    if lo <= 0:
        errors.append(f"mode.{name}: matrix is not positive definite (eigenvalue {lo:.4g})")


def scenario_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    """Validate a parsed document; raises ScenarioError listing every problem."""
    errors: list[str] = []
    known = {"name", "domain", "body", "target", "gamma", "vorticity", "mode", "numerics", "output"}
    for key in sorted(set(raw) - known):
        errors.append(f"unknown section '{key}'")
    name = raw.get("name", "scenario")
    if "domain" not in raw:
        errors.append("domain: missing section")
    domain = _section(DomainConfig, raw.get("domain"), "domain", errors, positive=("radius",))
    if domain.vertices is None and (domain.radius is None or domain.radius <= 0):
        errors.append("domain: give a positive radius or a vertex list")
    if len(domain.sigma) != 2 or not all(isinstance(s, (int, float)) for s in domain.sigma):
        errors.append("domain.sigma: expected two fractions")
    elif not (0 <= domain.sigma[0] < domain.sigma[1] <= 1 and domain.sigma[1] - domain.sigma[0] < 1):
        errors.append("domain.sigma: need 0 <= start < end <= 1 and a proper arc")
    bodies_raw = raw.get("body", [])
    if not bodies_raw:
        errors.append("body: at least one body is required")
    bodies = []
    for i, b in enumerate(bodies_raw):
        body = _section(BodyConfig, b, f"body[{i}]", errors, positive=("mass", "inertia", "a", "b"))
        if body.shape not in ("ellipse", "polygon"):
            errors.append(f"body[{i}].shape: must be 'ellipse' or 'polygon'")
        elif body.shape == "ellipse" and (body.a is None or body.b is None):
            errors.append(f"body[{i}]: ellipse needs a and b")
        elif body.shape == "polygon" and not body.vertices:
            errors.append(f"body[{i}]: polygon needs vertices")
        if len(body.pose) != 3:
            errors.append(f"body[{i}].pose: expected [x, y, angle]")
        if body.velocity is not None and len(body.velocity) != 3:
            errors.append(f"body[{i}].velocity: expected three numbers")
        bodies.append(body)
    n = 3 * len(bodies)
    target = _section(TargetConfig, raw.get("target"), "target", errors)
    if "target" not in raw:
        errors.append("target: missing section")
    times = np.asarray(target.times, dtype=float) if target.times else np.zeros(0)
    if len(times) < 2:
        errors.append("target.times: need at least two waypoint times")
    elif np.any(np.diff(times) < 0):
        errors.append("target.times: waypoint times must be increasing")
    if len(target.poses) != len(times):
        errors.append(f"target.poses: {len(target.poses)} poses for {len(times)} times")
    for j, p in enumerate(target.poses):
        if len(p) != n:
            errors.append(f"target.poses[{j}]: expected {n} numbers")
    if target.spline not in ("cubic", "quintic"):
        errors.append("target.spline: must be 'cubic' or 'quintic'")
    gamma = _tuplify(raw.get("gamma", [0.0] * len(bodies)))
    if len(gamma) != len(bodies):
        errors.append(f"gamma: expected {len(bodies)} circulations")
    vort_raw = raw.get("vorticity", {})
    if isinstance(vort_raw, dict) and vort_raw.get("particles") == "none":
        vort_raw = {**vort_raw, "particles": []}
    vort = _section(VorticityConfig, vort_raw, "vorticity", errors, positive=("blob_radius", "bound"))
    for j, p in enumerate(vort.particles):
        if len(p) != 3:
            errors.append(f"vorticity.particles[{j}]: expected [x, y, strength]")
    mode = _section(ModeConfig, raw.get("mode"), "mode", errors)
    if mode.kind not in ("exact", "pd"):
        errors.append("mode.kind: must be 'exact' or 'pd'")
    elif mode.kind == "pd" and n:
        _check_matrix(errors, "kp", mode.kp, n)
        _check_matrix(errors, "kd", mode.kd, n)
    numerics = _section(NumericsConfig, raw.get("numerics"), "numerics", errors,
                        positive=("dt", "resolution", "cutoff", "nu", "delta", "tol", "eps0",
                                  "cache_threshold", "max_iter", "n_modes"),
                        integers=("n_modes", "max_iter", "refine_iter", "seed"))
    output = _section(OutputConfig, raw.get("output"), "output", errors, integers=("interval", "particle_interval"))
    if isinstance(output.interval, int) and output.interval < 1:
        errors.append("output.interval: must be at least 1")
    if errors:
        raise ScenarioError(errors)
    cfg = ScenarioConfig(str(name), domain, tuple(bodies), target, tuple(float(g) for g in gamma), vort, mode,
                         numerics, output)
    try:
        domain.build()
        for b in bodies:
            b.build()
    except ValueError as exc:
        raise ScenarioError([f"geometry: {exc}"]) from None
    return cfg


def parse_scenario(path: str | Path) -> ScenarioConfig:
    """Read a TOML or JSON scenario file and validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"cannot read {path}: {exc.strerror}"]) from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ScenarioError([f"{path.name}: malformed file: {exc}"]) from None
    return scenario_from_dict(raw)


def serialize(cfg: ScenarioConfig, fmt: str = "toml") -> str:
    data = cfg.to_dict()
    if fmt == "json":
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
    return tomli_w.dumps(data)


def with_overrides(cfg: ScenarioConfig, dt: float | None = None, mode: str | None = None) -> ScenarioConfig:
    """Apply command-line overrides; the result is re-validated."""
    if dt is not None:
        cfg = replace(cfg, numerics=replace(cfg.numerics, dt=dt))
    if mode is not None:
        cfg = replace(cfg, mode=replace(cfg.mode, kind=mode))
    return scenario_from_dict(cfg.to_dict())


__all__ = ["ScenarioConfig", "ScenarioError", "parse_scenario", "scenario_from_dict", "serialize",
           "with_overrides"]
