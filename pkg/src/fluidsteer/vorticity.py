"""Vortex-blob transport: advection, boundary handling and a regularity probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from matplotlib.path import Path
from numpy.typing import NDArray

from .dynamics import VortexData
from .geometry import PanelMesh
from .laplace import fluid_mask

FloatArray = NDArray[np.float64]
Velocity = Callable[[FloatArray], FloatArray]


@dataclass
class VortexCloud(VortexData):
    """Blobs of circulation ``strengths`` at ``positions`` with common ``radius``.

    ``bound`` caps the represented vorticity ``|strength| / (pi radius^2)``.
    """

    bound: float = np.inf

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        st = np.asarray(self.strengths, dtype=float).ravel()
        if len(pos) != len(st):
            raise ValueError(f"{len(pos)} positions but {len(st)} strengths")
        if self.radius <= 0:
            raise ValueError("blob radius must be positive")
        self.positions = pos
        self.strengths = st
        if len(st) and self.peak_vorticity() > self.bound * (1 + 1e-12):
            raise ValueError(f"vorticity {self.peak_vorticity():.3g} exceeds bound {self.bound:.3g}")

    @classmethod
    def empty(cls, radius: float = 0.05, bound: float = np.inf) -> VortexCloud:
        return cls(np.zeros((0, 2)), np.zeros(0), radius, bound)

    def peak_vorticity(self) -> float:
        if len(self.strengths) == 0:
            return 0.0
        return float(np.max(np.abs(self.strengths)) / (np.pi * self.radius**2))

    def total_circulation(self) -> float:
        return float(np.sum(self.strengths))

    def moved(self, positions: FloatArray) -> VortexCloud:
        return VortexCloud(positions, self.strengths, self.radius, self.bound)

    def subset(self, keep: NDArray[np.bool_]) -> VortexCloud:
        return VortexCloud(self.positions[keep], self.strengths[keep], self.radius, self.bound)


def advect(cloud: VortexCloud, velocity: Velocity, dt: float) -> VortexCloud:
    """One classical RK4 step of every particle; strengths are carried unchanged."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(cloud) == 0:
        return cloud
    x = cloud.positions
    k1 = velocity(x)
    k2 = velocity(x + 0.5 * dt * k1)
    k3 = velocity(x + 0.5 * dt * k2)
    k4 = velocity(x + dt * k3)
    return cloud.moved(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


@dataclass
class BoundaryReport:
    removed: int
    reflected: int
    max_penetration: float


def _nearest_on_panels(mesh: PanelMesh, x: FloatArray, rows: slice):
    a = mesh.starts[rows]
    b = mesh.ends[rows]
    ab = b - a
    t = np.clip(np.einsum("pni,ni->pn", x[:, None, :] - a[None], ab) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(x[:, None, :] - foot, axis=-1)
    j = np.argmin(d, axis=1)
    return d[np.arange(len(x)), j], j + rows.start


def enforce_boundary(cloud: VortexCloud, mesh: PanelMesh, g: FloatArray | None = None
                     ) -> tuple[VortexCloud, BoundaryReport]:
    """Remove particles that left the domain; push particles off the bodies.

    Particles outside the outer boundary are removed (outflow through the
    control arc where ``g > 0``; elsewhere it can only be a time-step artifact,
    and it is counted the same way). Nothing is ever created, so entering
    vorticity is zero. A particle closer than one blob radius to a body, or
    inside it, is reflected along the nearest panel normal so that its distance
    becomes ``2 radius - depth``.
    """
    if len(cloud) == 0:
        return cloud, BoundaryReport(0, 0, 0.0)
    x = cloud.positions.copy()
    outer = mesh.slices[0]
    inside_outer = Path(mesh.starts[outer]).contains_points(x)
    keep = inside_outer
    reflected = 0
    depth_max = 0.0
    in_fluid = fluid_mask(mesh, x)
    delta = cloud.radius
    for sl in mesh.body_slices:
        d, j = _nearest_on_panels(mesh, x, sl)
        signed = np.where(in_fluid | ~inside_outer, d, -d)
        hit = keep & (signed < delta)
        if np.any(hit):
            n = -mesh.normals[j[hit]]  # normal out of the body into the fluid
            target = 2 * delta - signed[hit]
            x[hit] = x[hit] + (target - signed[hit])[:, None] * n
            reflected += int(hit.sum())
            depth_max = max(depth_max, float(np.max(delta - signed[hit])))
    return VortexCloud(x[keep], cloud.strengths[keep], cloud.radius, cloud.bound), \
        BoundaryReport(int((~keep).sum()), reflected, depth_max)


def dyadic_probes(centers: FloatArray, levels: int = 6, base: float = 0.1, seed: int = 0
                  ) -> tuple[FloatArray, FloatArray]:
    """Point pairs around ``centers`` at separations ``base * 2^-j`` in seeded random directions."""
    rng = np.random.default_rng(seed)
    centers = np.atleast_2d(centers)
    xs, ys = [], []
    for j in range(levels):
        ang = rng.uniform(0, 2 * np.pi, len(centers))
        off = 0.5 * base * 2.0**-j * np.column_stack([np.cos(ang), np.sin(ang)])
        xs.append(centers - off)
        ys.append(centers + off)
    return np.vstack(xs), np.vstack(ys)


def lipschitz_diagnostic(velocity: Velocity, probes: tuple[FloatArray, FloatArray]) -> float:
    """Max of ``|u(x) - u(y)| / (|x - y| (1 + max(0, -log|x - y|)))`` over probe pairs."""
    x, y = probes
    if len(x) == 0:
        return 0.0
    d = np.linalg.norm(x - y, axis=1)
    du = np.linalg.norm(velocity(x) - velocity(y), axis=1)
    return float(np.max(du / (d * (1.0 + np.maximum(0.0, -np.log(d))))))
