"""Time integration of bodies and vortex blobs, open loop or under feedback."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline, make_interp_spline
from scipy.optimize import least_squares

from .control import (ControlOutput, ControlSettings, FeedbackLaw, SynthesisError, check_gains, pd_target)
from .dynamics import FlowState, FluidModel
from .geometry import BodyShape, DomainSpec, min_separation
from .vorticity import VortexCloud, dyadic_probes, enforce_boundary, lipschitz_diagnostic

FloatArray = NDArray[np.float64]


class AbortedRun(RuntimeError):
    """The run stopped early; ``step`` is the index of the failed step.

    ``kind`` is ``"synthesis"`` when the control could not be built and
    ``"collision"`` when the bodies left the admissible set.
    """

    def __init__(self, step: int, reason: str, kind: str = "collision"):
        super().__init__(f"step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.kind = kind


# ---------------------------------------------------------------------------
# target trajectories
# ---------------------------------------------------------------------------

@dataclass
class TargetTrajectory:
    """Twice-differentiable pose curve through waypoints, at rest at both ends.

    ``quintic`` also pins the end accelerations to zero; ``cubic`` is a clamped
    cubic spline.
    """

    times: FloatArray
    poses: FloatArray
    gamma: FloatArray
    kind: str = "quintic"
    _spline: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=float))
        self.gamma = np.asarray(self.gamma, dtype=float)
        if len(self.times) != len(self.poses):
            raise ValueError("one pose per waypoint time is required")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("waypoint times must be increasing")
        if self.horizon == 0:
            self._spline = None
        elif self.kind == "cubic":
            self._spline = CubicSpline(self.times, self.poses, bc_type="clamped")
        elif self.kind == "quintic":
            zero = [(1, np.zeros(self.poses.shape[1])), (2, np.zeros(self.poses.shape[1]))]
            self._spline = make_interp_spline(self.times, self.poses, k=5, bc_type=(zero, zero))
        else:
            raise ValueError(f"unknown spline kind {self.kind!r}")

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def start(self) -> float:
        return float(self.times[0])

    def __call__(self, t: float) -> tuple[FloatArray, FloatArray, FloatArray]:
        if self._spline is None:
            z = np.zeros(self.poses.shape[1])
            return self.poses[0].copy(), z, z.copy()
        t = float(np.clip(t, self.times[0], self.times[-1]))
        s = self._spline
        return s(t), s(t, 1), s(t, 2)

    def check(self, domain: DomainSpec, shapes: list[BodyShape], delta: float, samples: int = 200) -> float:
        """Smallest separation along the curve; raises if it drops below ``delta``."""
        worst = np.inf
        for t in np.linspace(self.times[0], self.times[-1], samples):
            worst = min(worst, min_separation(domain, shapes, self(t)[0]))
        if worst < delta:
            raise ValueError(f"target trajectory leaves the admissible set (separation {worst:.4g} < {delta:.4g})")
        return worst


# ---------------------------------------------------------------------------
# state and report
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    t: float
    q: FloatArray
    qdot: FloatArray
    cloud: VortexCloud


COLUMNS = ("t", "err_pos", "err_vel", "ctrl_residual", "ctrl_norm")


@dataclass
class StepRow:
    t: float
    err_pos: float
    err_vel: float
    ctrl_residual: float
    ctrl_norm: float
    gammas: tuple[float, ...]
    energy: float
    lipschitz_diag: float
    particles: int


@dataclass
class TrackingReport:
    """Per-step rows plus a header describing the run."""

    n_bodies: int
    header: dict = field(default_factory=dict)
    rows: list[StepRow] = field(default_factory=list)
    aborted: str | None = None
    abort_kind: str | None = None
    control_rows: list[tuple] = field(default_factory=list)
    force_rows: list[tuple] = field(default_factory=list)
    poses: list[tuple[FloatArray, FloatArray]] = field(default_factory=list)

    def columns(self) -> list[str]:
        return list(COLUMNS) + [f"gamma_{k + 1}" for k in range(self.n_bodies)] + \
            ["energy", "lipschitz_diag", "particles"]

    def array(self, name: str) -> FloatArray:
        if name.startswith("gamma_"):
            k = int(name[6:]) - 1
            return np.array([r.gammas[k] for r in self.rows], dtype=float)
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def summary(self) -> dict:
        if not self.rows:
            return {"steps": 0, "max_err_pos": 0.0, "max_err_vel": 0.0, "max_ctrl_residual": 0.0,
                    "final_err_pos": 0.0, "aborted": self.aborted}
        out = {"steps": len(self.rows),
               "max_err_pos": float(self.array("err_pos").max()),
               "max_err_vel": float(self.array("err_vel").max()),
               "max_ctrl_residual": float(self.array("ctrl_residual").max()),
               "final_err_pos": float(self.rows[-1].err_pos),
               "aborted": self.aborted}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.header):
            value = self.header[key]
            text = value if isinstance(value, str) else json.dumps(value, sort_keys=True, separators=(",", ":"))
            buf.write(f"# {key}: {text}\n")
        if self.aborted:
            buf.write(f"# aborted: {self.aborted}\n")
        buf.write(",".join(self.columns()) + "\n")
        for r in self.rows:
            vals = [r.t, r.err_pos, r.err_vel, r.ctrl_residual, r.ctrl_norm, *r.gammas, r.energy, r.lipschitz_diag]
            buf.write(",".join(f"{v:.10e}" for v in vals) + f",{r.particles}\n")
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def controls_csv(self) -> str:
        lines = ["t,stage,residual,control_norm,cache_hit,eps"]
        lines += [f"{t:.10e},{k},{res:.10e},{norm:.10e},{hit},{eps:.10e}" for t, k, res, norm, hit, eps in self.control_rows]
        return "\n".join(lines) + "\n"

    def forces_csv(self) -> str:
        n = 3 * self.n_bodies
        head = ["t", "stage"] + [f"drift_{i + 1}" for i in range(n)] + [f"control_{i + 1}" for i in range(n)]
        lines = [",".join(head)]
        for t, k, *vals in self.force_rows:
            lines.append(f"{t:.10e},{k}," + ",".join(f"{v:.10e}" for v in vals))
        return "\n".join(lines) + "\n"


def fit_decay_rate(t: FloatArray, err: FloatArray) -> float:
    """Rate ``lam`` of the best fit ``(a + b t) exp(-lam t)`` to an error history."""
    t = np.asarray(t, dtype=float) - t[0]
    err = np.asarray(err, dtype=float)
    scale = max(err.max(), 1e-300)
    span = max(t[-1], 1e-12)

    def linear_part(lam):
        basis = np.column_stack([np.exp(-lam * t), t * np.exp(-lam * t)])
        coef, *_ = np.linalg.lstsq(basis, err, rcond=None)
        return coef, float(np.sum((basis @ coef - err) ** 2))

    # a and b enter linearly, so scan the rate and polish the best candidate
    grid = np.logspace(-3, 3, 600) / span
    lam0 = grid[int(np.argmin([linear_part(lam)[1] for lam in grid]))]
    (a0, b0), _ = linear_part(lam0)

    def resid(p):
        a, b, lam = p
        return ((a + b * t) * np.exp(-lam * t) - err) / scale

    sol = least_squares(resid, [a0, b0, lam0], x_scale=[scale, scale * lam0, lam0], xtol=1e-14, ftol=1e-14)
    return float(sol.x[2])


def companion_rate(KP: FloatArray, KD: FloatArray) -> float:
    """Decay rate predicted by the error equation ``e'' + K_D e' + K_P e = 0``."""
    n = KP.shape[0]
    comp = np.block([[np.zeros((n, n)), np.eye(n)], [-KP, -KD]])
    return float(-np.max(np.linalg.eigvals(comp).real))


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    qddot: FloatArray
    particle_velocity: FloatArray
    control: ControlOutput | None
    residual: float
    state: FlowState
    drift_force: FloatArray
    control_force: FloatArray


class Simulator:
    """Couples body motion, blob transport and (optionally) the feedback law.

    ``mode`` is ``"open"`` (no control), ``"exact"`` or ``"pd"``. Each RK4
    stage rebuilds the flow at the stage state and re-evaluates the control.
    """

    def __init__(self, model: FluidModel, gamma: FloatArray, target: TargetTrajectory | None = None,
                 law: FeedbackLaw | None = None, mode: str = "open", gains: tuple | None = None,
                 delta: float = 0.0, probe_seed: int = 0):
        if mode not in ("open", "exact", "pd"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "open" and (law is None or target is None):
            raise ValueError("closed-loop modes need a target and a feedback law")
        if mode == "pd":
            check_gains(*gains)
        self.model = model
        self.gamma = np.asarray(gamma, dtype=float)
        self.target = target
        self.law = law
        self.mode = mode
        self.gains = gains
        self.delta = delta
        self.probe_seed = probe_seed

    # -- stage evaluation ------------------------------------------------
    def desired(self, t: float, q: FloatArray, qdot: FloatArray) -> FloatArray:
        ref = self.target(t)
        if self.mode == "exact":
            return ref[2]
        return pd_target(q, qdot, ref, *self.gains)

    def stage(self, t: float, q: FloatArray, qdot: FloatArray, cloud: VortexCloud) -> StageResult:
        mesh = self.model.mesh(q, check=False)
        if self.delta > 0:
            sep = min_separation(self.model.domain, self.model.shapes, q)
            if sep < self.delta:
                raise AbortedRun(-1, f"collision margin violated (separation {sep:.4g} < {self.delta:.4g})")
        state = FlowState(self.model, q, qdot, self.gamma, cloud, mesh)
        Mtot = state.mass.Mtot
        if self.mode == "open":
            drift = state.Ftilde()
            qddot = -np.linalg.solve(Mtot, drift)
            u = state.particle_velocity()
            return StageResult(qddot, u, None, 0.0, state, drift, np.zeros_like(drift))
        want = self.desired(t, q, qdot)
        out = self.law.feedback(state, want)
        # the plant re-solves for the potential of g rather than reusing the controller's combination
        alpha = state.control_fields(out.g)
        drift = state.Ftilde()
        pushed = state.Q(alpha) + state.L_matrix(alpha)[:, 0]
        force = pushed + drift
        qddot = -np.linalg.solve(Mtot, force)
        residual = float(np.linalg.norm(force + Mtot @ want))
        u = state.particle_velocity(alpha) if len(cloud) else np.zeros((0, 2))
        return StageResult(qddot, u, out, residual, state, drift, pushed)

    # -- one step --------------------------------------------------------
    def rk4(self, s: SimState, dt: float) -> tuple[SimState, list[StageResult]]:
        x0 = s.cloud.positions
        stages = []

        def ev(tau, q, qd, x):
            r = self.stage(tau, q, qd, s.cloud.moved(x))
            stages.append(r)
            return qd, r.qddot, r.particle_velocity

        k1 = ev(s.t, s.q, s.qdot, x0)
        k2 = ev(s.t + dt / 2, s.q + dt / 2 * k1[0], s.qdot + dt / 2 * k1[1], x0 + dt / 2 * k1[2])
        k3 = ev(s.t + dt / 2, s.q + dt / 2 * k2[0], s.qdot + dt / 2 * k2[1], x0 + dt / 2 * k2[2])
        k4 = ev(s.t + dt, s.q + dt * k3[0], s.qdot + dt * k3[1], x0 + dt * k3[2])
        comb = [(a + 2 * b + 2 * c + d) * (dt / 6) for a, b, c, d in zip(k1, k2, k3, k4)]
        q = s.q + comb[0]
        qdot = s.qdot + comb[1]
        x = x0 + comb[2]
        cloud = s.cloud.moved(x)
        if len(cloud):
            mesh = self.model.mesh(q, check=False)
            cloud, _ = enforce_boundary(cloud, mesh)
        return SimState(s.t + dt, q, qdot, cloud), stages

    def step(self, s: SimState, dt: float, max_halvings: int = 4) -> tuple[SimState, list[StageResult]]:
        """Advance by ``dt``; on a synthesis failure retry with 2, 4, ... substeps."""
        last = None
        for level in range(max_halvings + 1):
            n = 2**level
            try:
                cur, all_stages = s, []
                for _ in range(n):
                    cur, st = self.rk4(cur, dt / n)
                    all_stages += st
                return cur, all_stages
            except (SynthesisError, np.linalg.LinAlgError) as exc:
                last = exc
        raise AbortedRun(-1, f"control synthesis failed after {max_halvings} halvings: {last}", "synthesis")

    # -- diagnostics -----------------------------------------------------
    def row(self, s: SimState, stages: list[StageResult]) -> StepRow:
        if stages:
            state = stages[-1].state
        else:
            state = FlowState(self.model, s.q, s.qdot, self.gamma, s.cloud, self.model.mesh(s.q, check=False))
        if self.target is not None:
            ref = self.target(s.t)
            ep = float(np.linalg.norm(ref[0] - s.q))
            ev = float(np.linalg.norm(ref[1] - s.qdot))
        else:
            ep = ev = 0.0
        residual = max((r.residual for r in stages), default=0.0)
        ctrl = stages[-1].control if stages else None
        if ctrl is not None:
            m = state.mesh
            norm = float(np.sqrt(np.sum(m.lengths * ctrl.g**2)))
        else:
            norm = 0.0
        energy = 0.5 * float(s.qdot @ state.mass.Mtot @ s.qdot) if not stages else \
            0.5 * float(s.qdot @ self._mass_at(s.q) @ s.qdot)
        return StepRow(s.t, ep, ev, residual, norm, tuple(float(g) for g in state.circulations()), energy,
                       self.lipschitz(state, ctrl), len(s.cloud))

    def _mass_at(self, q: FloatArray) -> FloatArray:
        from .dynamics import generalized_mass

        return generalized_mass(self.model, self.model.mesh(q, check=False)).Mtot

    def lipschitz(self, state: FlowState, ctrl: ControlOutput | None) -> float:
        m = state.mesh
        delta = state.cloud.radius
        if len(state.cloud):
            centers = state.cloud.positions
        else:
            body = np.flatnonzero(m.body_mask)[::8]
            centers = m.midpoints[body] - 3 * delta * m.normals[body]
        probes = dyadic_probes(centers, levels=4, base=delta, seed=self.probe_seed)
        field = None if ctrl is None else ctrl.alpha
        return lipschitz_diagnostic(lambda x: state.velocity_at(x, field), probes)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def uncontrolled_step(sim: Simulator, state: SimState, dt: float) -> SimState:
    if sim.mode != "open":
        raise ValueError("uncontrolled_step needs an open-loop simulator")
    return sim.step(state, dt)[0]


def closed_loop_step(sim: Simulator, state: SimState, dt: float) -> tuple[SimState, list[StageResult]]:
    if sim.mode == "open":
        raise ValueError("closed_loop_step needs a feedback law")
    return sim.step(state, dt)


def _poses(sim: Simulator, state: SimState) -> tuple[FloatArray, FloatArray]:
    ref = sim.target(state.t)[0] if sim.target is not None else state.q
    return state.q.copy(), np.asarray(ref, dtype=float)


def simulate(sim: Simulator, state: SimState, dt: float, n_steps: int, interval: int = 1,
             report: TrackingReport | None = None) -> tuple[SimState, TrackingReport]:
    """Run ``n_steps`` steps, recording a row every ``interval`` steps (and the last)."""
    report = report or TrackingReport(sim.model.n_bodies)
    report.rows.append(sim.row(state, []))
    report.poses.append(_poses(sim, state))
    for i in range(n_steps):
        try:
            state, stages = sim.step(state, dt)
        except AbortedRun as exc:
            report.aborted = f"step {i}: {exc.reason}"
            report.abort_kind = exc.kind
            break
        for k, r in enumerate(stages):
            report.force_rows.append((state.t, k, *r.drift_force, *r.control_force))
            if r.control is not None:
                report.control_rows.append((state.t, k, r.residual, float(np.sqrt(np.sum(r.state.mesh.lengths * r.control.g**2))),
                                            int(r.control.cache_hit), r.control.eps))
        if (i + 1) % interval == 0 or i + 1 == n_steps:
            report.rows.append(sim.row(state, stages))
            report.poses.append(_poses(sim, state))
    return state, report


def build_from_scenario(cfg, mode: str | None = None, law: FeedbackLaw | None = None):
    """Model, simulator and initial state described by a scenario config.

    Passing ``law`` reuses its cached control sets; it must belong to the same geometry.
    """
    domain = cfg.domain.build()
    shapes = [b.build() for b in cfg.bodies]
    num = cfg.numerics
    blob = cfg.vorticity.blob_radius
    model = FluidModel(domain, shapes, num.resolution, blob_radius=blob)
    target = TargetTrajectory(np.array(cfg.target.times), np.array(cfg.target.poses, dtype=float),
                              np.array(cfg.gamma), cfg.target.spline)
    kind = mode or cfg.mode.kind
    settings = ControlSettings(n_modes=num.n_modes, cutoff=num.cutoff, nu_target=num.nu, max_iter=num.max_iter,
                               refine_iter=num.refine_iter, cache_threshold=num.cache_threshold, eps0=num.eps0,
                               tol=num.tol, seed=num.seed)
    law = law or FeedbackLaw(model, settings)
    gains = cfg.gains() if kind == "pd" else None
    sim = Simulator(model, np.array(cfg.gamma), target, law, kind, gains, delta=num.delta, probe_seed=num.seed)
    q0 = cfg.initial_pose()
    v0 = cfg.initial_velocity()
    qd0 = target(target.start)[1] if v0 is None else v0
    parts = np.array(cfg.vorticity.particles, dtype=float).reshape(-1, 3)
    bound = cfg.vorticity.bound if cfg.vorticity.bound is not None else np.inf
    cloud = VortexCloud(parts[:, :2], parts[:, 2], model.vortex_radius, bound)
    return model, sim, SimState(target.start, q0, qd0, cloud)


def run_tracking(cfg, mode: str | None = None, law: FeedbackLaw | None = None) -> TrackingReport:
    """Integrate a scenario over its horizon and return the report."""
    model, sim, state = build_from_scenario(cfg, mode, law)
    report = TrackingReport(model.n_bodies)
    report.header = {"scenario": cfg.name, "config_hash": cfg.digest(), "seed": cfg.numerics.seed,
                     "mode": sim.mode, "config": cfg.to_dict()}
    T = sim.target.horizon
    if T == 0:
        return report
    sim.target.check(model.domain, model.shapes, cfg.numerics.delta)
    n_steps = max(1, int(round(T / cfg.numerics.dt)))
    dt = T / n_steps
    _, report = simulate(sim, state, dt, n_steps, cfg.output.interval, report)
    report.header["concentration_nu"] = [round(e.nu, 6) for e in sim.law.cache]
    if sim.mode == "pd" and len(report.rows) > 3:
        report.header["decay_rate"] = round(fit_decay_rate(report.array("t"), report.array("err_pos")), 10)
        report.header["predicted_rate"] = round(companion_rate(*sim.gains), 10)
    return report
