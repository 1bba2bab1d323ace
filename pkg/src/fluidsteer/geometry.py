"""Domain, body shapes, rigid placement and panel meshes.

Poses are flat vectors ``q = (h1x, h1y, theta1, h2x, h2y, theta2, ...)``.
Body boundaries are counterclockwise polylines in a body frame; the outer
boundary is given counterclockwise by the user and reversed internally so
that every panel has the fluid on its right and the normal ``n = tau_perp``
points out of the fluid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import NDArray
from shapely.geometry import LineString, Polygon

FloatArray = NDArray[np.float64]

DEFAULT_VERTICES = 256


def perp(v: FloatArray) -> FloatArray:
    """Rotate vectors by +90 degrees: ``(x, y) -> (-y, x)``."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def rotation(theta: float) -> FloatArray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def decode_index(k: int) -> tuple[int, int]:
    """Map a flat generalized coordinate index to ``(body, component)``."""
    return k // 3, k % 3


def signed_area(pts: FloatArray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(pts: FloatArray) -> FloatArray:
    x, y = pts[:, 0], pts[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    area = 0.5 * cross.sum()
    cx = np.sum((x + np.roll(x, -1)) * cross) / (6.0 * area)
    cy = np.sum((y + np.roll(y, -1)) * cross) / (6.0 * area)
    return np.array([cx, cy])


@dataclass(slots=True)
class ClosedCurve:
    """A closed counterclockwise curve that can be sampled by arclength fraction.

    ``kind`` is ``"ellipse"`` (params ``a, b``), ``"circle"`` (``radius``) or
    ``"polygon"`` (``vertices``). Analytic kinds are sampled exactly.
    """

    kind: str
    params: dict
    _table: tuple | None = field(default=None, repr=False)
    _perimeter: float | None = field(default=None, repr=False)

    @classmethod
    def ellipse(cls, a: float, b: float) -> ClosedCurve:
        if a <= 0 or b <= 0:
            raise ValueError("ellipse semi-axes must be positive")
        return cls("ellipse", {"a": float(a), "b": float(b)})

    @classmethod
    def circle(cls, radius: float) -> ClosedCurve:
        if radius <= 0:
            raise ValueError("circle radius must be positive")
        return cls("circle", {"radius": float(radius)})

    @classmethod
    def polygon(cls, vertices) -> ClosedCurve:
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices of shape (n, 2)")
        return cls("polygon", {"vertices": v})

    def _ellipse_table(self) -> tuple[FloatArray, FloatArray]:
        if self._table is None:
            a, b = self.params["a"], self.params["b"]
            t = np.linspace(0.0, 2 * np.pi, 8193)
            speed = np.hypot(a * np.sin(t), b * np.cos(t))
            s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(t))])
            self._table = (s / s[-1], t)
        return self._table

    @property
    def perimeter(self) -> float:
        if self.kind == "circle":
            return 2 * np.pi * self.params["radius"]
        if self.kind == "ellipse":
            if self._perimeter is None:
                a, b = self.params["a"], self.params["b"]
                t = np.linspace(0.0, 2 * np.pi, 4097)[:-1]
                self._perimeter = float(np.mean(np.hypot(a * np.sin(t), b * np.cos(t))) * 2 * np.pi)
            return self._perimeter
        v = self.params["vertices"]
        return float(np.sum(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))

    def at(self, frac) -> FloatArray:
        """Points at arclength fractions ``frac`` in [0, 1), counterclockwise."""
        frac = np.mod(np.asarray(frac, dtype=float), 1.0)
        if self.kind == "circle":
            r = self.params["radius"]
            ang = 2 * np.pi * frac
            return np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        if self.kind == "ellipse":
            sfrac, t = self._ellipse_table()
            ang = np.interp(frac, sfrac, t)
            return np.column_stack([self.params["a"] * np.cos(ang), self.params["b"] * np.sin(ang)])
        v = self.params["vertices"]
        closed = np.vstack([v, v[:1]])
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
        target = frac * s[-1]
        return np.column_stack([np.interp(target, s, closed[:, 0]), np.interp(target, s, closed[:, 1])])

    def sample(self, n: int) -> FloatArray:
        return self.at(np.arange(n) / n)


@dataclass(slots=True)
class BodyShape:
    """Rigid body: boundary polyline in its reference placement plus inertia.

    The boundary is counterclockwise. ``ref_center`` is the point that the
    pose coordinates ``(hx, hy)`` track; it defaults to the polygon centroid.
    """

    curve: ClosedCurve
    mass: float
    inertia: float
    ref_center: FloatArray = field(default=None)
    n_vertices: int = DEFAULT_VERTICES
    allow_disk: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not (self.mass > 0 and self.inertia > 0):
            raise ValueError("body mass and inertia must be positive")
        pts = self.curve.sample(self.n_vertices)
        if signed_area(pts) <= 0:
            raise ValueError("body boundary must be counterclockwise with positive area")
        if not Polygon(pts).is_valid:
            raise ValueError("body boundary must be a simple closed curve")
        if self.ref_center is None:
            self.ref_center = polygon_centroid(pts)
        self.ref_center = np.asarray(self.ref_center, dtype=float)
        d = np.linalg.norm(pts - polygon_centroid(pts), axis=1)
        if not self.allow_disk and d.max() / d.min() <= 1.0 + 1e-6:
            raise ValueError("body shape is a disk; rotations would be uncontrollable")

    @property
    def boundary(self) -> FloatArray:
        return self.local_points(self.n_vertices)

    @property
    def perimeter(self) -> float:
        return self.curve.perimeter

    def local_points(self, n: int) -> FloatArray:
        """``n`` boundary points relative to ``ref_center`` (cached per ``n``)."""
        pts = self._cache.get(n)
        if pts is None:
            pts = self.curve.sample(n) - self.ref_center
            self._cache[n] = pts
        return pts

    @property
    def length_scale(self) -> float:
        """Body length: the largest vertex-to-vertex distance."""
        pts = self.boundary
        hull = pts[:: max(1, len(pts) // 128)]
        return float(np.max(np.linalg.norm(hull[:, None, :] - hull[None, :, :], axis=-1)))


@dataclass(slots=True)
class DomainSpec:
    """Outer boundary (counterclockwise curve) and the control arc Sigma.

    Sigma runs counterclockwise from arclength fraction ``sigma[0]`` to
    ``sigma[1]`` of the outer curve (wrapping through 0 when needed).
    """

    outer: ClosedCurve
    sigma: tuple[float, float]

    def __post_init__(self) -> None:
        s0, s1 = self.sigma
        if not (0.0 <= s0 < 1.0 and 0.0 <= s1 < 1.0):
            raise ValueError("sigma endpoints must be fractions in [0, 1)")
        if s0 == s1:
            raise ValueError("sigma must be a nonempty proper sub-arc")
        pts = self.outer.sample(DEFAULT_VERTICES)
        if signed_area(pts) <= 0:
            raise ValueError("outer boundary must be given counterclockwise")

    @property
    def sigma_fraction(self) -> float:
        s0, s1 = self.sigma
        return (s1 - s0) % 1.0

    @property
    def diameter(self) -> float:
        pts = self.outer.sample(DEFAULT_VERTICES)
        return float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))

    def contains(self, x: FloatArray) -> NDArray[np.bool_]:
        """Points strictly inside the outer boundary."""
        from matplotlib.path import Path

        return Path(self.outer.sample(1024)).contains_points(np.atleast_2d(x))


def check_pose(q: FloatArray, n_bodies: int) -> FloatArray:
    q = np.asarray(q, dtype=float).ravel()
    if q.size != 3 * n_bodies:
        raise ValueError(f"pose has {q.size} entries, expected {3 * n_bodies} for {n_bodies} bodies")
    return q


def place_points(local: FloatArray, q_body: FloatArray) -> FloatArray:
    """Apply the rigid motion of one body to body-frame points."""
    return local @ rotation(q_body[2]).T + q_body[:2]


def place_bodies(shapes: list[BodyShape], q: FloatArray) -> list[FloatArray]:
    """World-frame boundary polylines ``R(theta)(X - h0) + h`` for each body."""
    q = check_pose(q, len(shapes))
    return [place_points(s.boundary, q[3 * i : 3 * i + 3]) for i, s in enumerate(shapes)]


def min_separation(domain: DomainSpec, shapes: list[BodyShape], q: FloatArray) -> float:
    """Smallest body-body or body-wall distance; negative when curves overlap."""
    placed = place_bodies(shapes, q)
    outer = domain.outer.sample(DEFAULT_VERTICES * 2)
    outer_poly = Polygon(outer)
    outer_line = LineString(np.vstack([outer, outer[:1]]))
    best = np.inf
    polys = [Polygon(p) for p in placed]
    for i, (pts, poly) in enumerate(zip(placed, polys)):
        line = LineString(np.vstack([pts, pts[:1]]))
        if not outer_poly.contains(poly):
            outside = poly.difference(outer_poly)
            best = min(best, -max(np.sqrt(outside.area), 1e-12))
        else:
            best = min(best, line.distance(outer_line))
        for other in polys[i + 1 :]:
            if poly.intersects(other):
                overlap = poly.intersection(other)
                best = min(best, -max(np.sqrt(overlap.area), 1e-12))
            else:
                best = min(best, poly.exterior.distance(other.exterior))
    return float(best)


class PanelMesh:
    """Straight panels covering the fluid boundary.

    Component 0 is the outer boundary (clockwise); component ``k + 1`` is body
    ``k`` (counterclockwise). ``sigma`` flags panels on the control arc and
    ``sigma_s`` holds their arclength fraction along the arc.
    """

    def __init__(self, starts: FloatArray, ends: FloatArray, component: NDArray[np.int64],
                 sigma: NDArray[np.bool_], sigma_s: FloatArray, q: FloatArray, ref_points: FloatArray):
        self.starts = starts
        self.ends = ends
        self.component = component
        self.sigma = sigma
        self.sigma_s = sigma_s
        self.q = q
        self.ref_points = ref_points
        self.cache: dict = {}
        d = ends - starts
        self.lengths = np.linalg.norm(d, axis=1)
        if np.any(self.lengths <= 1e-14):
            raise ValueError("degenerate zero-length panel")
        self.tangents = d / self.lengths[:, None]
        self.normals = perp(self.tangents)
        self.midpoints = 0.5 * (starts + ends)
        self.n_bodies = int(component.max())
        bounds = np.flatnonzero(np.diff(component)) + 1
        edges = np.concatenate([[0], bounds, [len(component)]])
        self.slices = [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def body_slices(self) -> list[slice]:
        return self.slices[1:]

    @cached_property
    def body_mask(self) -> NDArray[np.bool_]:
        return self.component > 0

    @cached_property
    def rigid_data(self) -> FloatArray:
        """Neumann data ``xi_k . n`` of unit rigid motions, shape (n_panels, 3N)."""
        out = np.zeros((len(self), 3 * self.n_bodies))
        for k in range(self.n_bodies):
            sl = self.slices[k + 1]
            n = self.normals[sl]
            arm = self.midpoints[sl] - self.ref_points[k]
            out[sl, 3 * k] = n[:, 0]
            out[sl, 3 * k + 1] = n[:, 1]
            out[sl, 3 * k + 2] = np.sum(perp(arm) * n, axis=1)
        return out

    def rigid_velocity(self, qdot: FloatArray) -> FloatArray:
        """Velocity of the material boundary point at each panel midpoint (zero on the wall)."""
        v = np.zeros((len(self), 2))
        for k in range(self.n_bodies):
            sl = self.slices[k + 1]
            w = qdot[3 * k : 3 * k + 3]
            v[sl] = w[:2] + w[2] * perp(self.midpoints[sl] - self.ref_points[k])
        return v

    def turning(self, comp: int) -> float:
        """Total signed turning of the tangent along one component."""
        t = self.tangents[self.slices[comp]]
        ang = np.arctan2(t[:, 1], t[:, 0])
        d = np.diff(np.concatenate([ang, ang[:1]]))
        return float(np.sum((d + np.pi) % (2 * np.pi) - np.pi))


def build_mesh(domain: DomainSpec, shapes: list[BodyShape], q: FloatArray, resolution: float,
               margin: float | None = None) -> PanelMesh:
    """Panel the outer boundary and every placed body at ``resolution`` panels per unit length.

    Sigma's endpoints are panel vertices so the control arc is tagged exactly.
    """
    if resolution <= 0:
        raise ValueError("mesh resolution must be positive")
    q = check_pose(q, len(shapes))
    if margin is not None:
        sep = min_separation(domain, shapes, q)
        if sep < margin:
            raise ValueError(f"collision margin violated: separation {sep:.4g} < {margin:.4g}")
    s0, _ = domain.sigma
    frac = domain.sigma_fraction
    n_outer = max(16, int(np.ceil(domain.outer.perimeter * resolution)))
    n_sig = max(4, int(round(n_outer * frac)))
    n_rest = max(4, n_outer - n_sig)
    # counterclockwise points: Sigma first, then the remainder of the loop
    fr = np.concatenate([s0 + frac * np.arange(n_sig) / n_sig,
                         s0 + frac + (1 - frac) * np.arange(n_rest) / n_rest])
    ccw = domain.outer.at(fr)
    ccw_flag = np.concatenate([np.ones(n_sig, bool), np.zeros(n_rest, bool)])
    ccw_s = np.concatenate([(np.arange(n_sig) + 0.5) / n_sig, np.zeros(n_rest)])
    # clockwise traversal: reverse the point order; panel i joins cw[i] -> cw[i+1]
    cw = ccw[::-1]
    starts = [cw]
    ends = [np.roll(cw, -1, axis=0)]
    # clockwise panel i is counterclockwise panel m - 2 - i traversed backwards
    idx = (len(ccw) - 2 - np.arange(len(ccw))) % len(ccw)
    sigma_flags = [ccw_flag[idx]]
    sigma_s = [np.where(ccw_flag[idx], ccw_s[idx], 0.0)]
    comps = [np.zeros(len(cw), dtype=np.int64)]
    refs = []
    for k, shape in enumerate(shapes):
        nb = max(16, int(np.ceil(shape.perimeter * resolution)))
        qb = q[3 * k : 3 * k + 3]
        pts = place_points(shape.local_points(nb), qb)
        starts.append(pts)
        ends.append(np.roll(pts, -1, axis=0))
        sigma_flags.append(np.zeros(nb, bool))
        sigma_s.append(np.zeros(nb))
        comps.append(np.full(nb, k + 1, dtype=np.int64))
        refs.append(qb[:2].copy())
    return PanelMesh(np.vstack(starts), np.vstack(ends), np.concatenate(comps),
                     np.concatenate(sigma_flags), np.concatenate(sigma_s), q.copy(),
                     np.array(refs).reshape(-1, 2))
