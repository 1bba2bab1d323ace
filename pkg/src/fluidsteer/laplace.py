"""Boundary element solvers for Laplace problems in the fluid domain.

Direct boundary integral formulation with piecewise-constant panels,
midpoint collocation and analytic panel integrals of the kernel
``G(x, y) = -log|x - y| / (2 pi)``.  For a harmonic ``u`` with boundary values
``u_j`` and normal derivatives ``f_j`` (normal out of the fluid)::

    u(x) = sum_j S_j(x) f_j - sum_j D_j(x) u_j              (x in the fluid)
    u_i / 2 + sum_j D_ij u_j = sum_j S_ij f_j                (x_i on a panel)

One LU factorization per mesh serves every right-hand side.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.special import exp1

from .geometry import DomainSpec, PanelMesh, perp

FloatArray = NDArray[np.float64]

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# panel integrals
# ---------------------------------------------------------------------------

def _local(mesh: PanelMesh, x: FloatArray, cols: slice | None = None):
    sl = slice(None) if cols is None else cols
    a = mesh.starts[sl]
    t = mesh.tangents[sl]
    n = mesh.normals[sl]
    L = mesh.lengths[sl]
    d = x[:, None, :] - a[None, :, :]
    xi = d[..., 0] * t[:, 0] + d[..., 1] * t[:, 1]
    eta = d[..., 0] * n[:, 0] + d[..., 1] * n[:, 1]
    ra2 = xi * xi + eta * eta
    rb2 = (xi - L) ** 2 + eta * eta
    theta = np.arctan2(eta * L, eta * eta - xi * (L - xi))
    return xi, eta, ra2, rb2, theta, L, t, n


def layer_matrices(mesh: PanelMesh, x: FloatArray, cols: slice | None = None,
                   self_rows: NDArray[np.int64] | None = None) -> tuple[FloatArray, FloatArray]:
    """Single- and double-layer panel integrals at points ``x``.

    ``self_rows`` lists, for each target row, the panel it sits on (or -1);
    the double-layer principal value on a flat panel is zero.
    """
    xi, eta, ra2, rb2, theta, L, _, _ = _local(mesh, x, cols)
    with np.errstate(divide="ignore", invalid="ignore"):
        la = np.where(ra2 > 0, 0.5 * np.log(ra2), 0.0)
        lb = np.where(rb2 > 0, 0.5 * np.log(rb2), 0.0)
    ilog = (L - xi) * lb + xi * la - L + eta * theta
    S = -ilog / TWO_PI
    D = theta / TWO_PI
    if self_rows is not None:
        rows = np.flatnonzero(self_rows >= 0)
        D[rows, self_rows[rows]] = 0.0
    return S, D


def layer_gradients(mesh: PanelMesh, x: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Gradients in ``x`` of the single- and double-layer panel integrals, shape (p, n, 2)."""
    _, _, ra2, rb2, theta, _, t, n = _local(mesh, x)
    logratio = 0.5 * (np.log(ra2) - np.log(rb2))
    gS = -(logratio[..., None] * t[None] + theta[..., None] * n[None]) / TWO_PI
    da = mesh.starts[None, :, :] - x[:, None, :]
    db = mesh.ends[None, :, :] - x[:, None, :]
    gD = (perp(da) / np.sum(da * da, -1)[..., None] - perp(db) / np.sum(db * db, -1)[..., None]) / TWO_PI
    return gS, gD


# ---------------------------------------------------------------------------
# per-mesh operators
# ---------------------------------------------------------------------------

def _tangential_matrix(mesh: PanelMesh) -> sp.csr_matrix:
    """Periodic three-point derivative along arclength on every closed component."""
    rows, cols, vals = [], [], []
    for sl in mesh.slices:
        idx = np.arange(sl.start, sl.stop)
        L = mesh.lengths[sl]
        h2 = 0.5 * (L + np.roll(L, -1))      # midpoint spacing to next panel
        h1 = np.roll(h2, 1)                   # spacing to previous panel
        prev = np.roll(idx, 1)
        nxt = np.roll(idx, -1)
        rows += [idx, idx, idx]
        cols += [prev, idx, nxt]
        vals += [-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))]
    n = len(mesh)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


_WALL_BLOCKS: dict[bytes, tuple[FloatArray, FloatArray]] = {}


def _collocation_matrices(mesh: PanelMesh) -> tuple[FloatArray, FloatArray]:
    """Collocated layer matrices; the wall-wall block is shared by meshes with the same wall."""
    n = len(mesh)
    wall = mesh.slices[0]
    nw = wall.stop
    if nw == n:
        return layer_matrices(mesh, mesh.midpoints, self_rows=np.arange(n))
    key = hashlib.sha1(mesh.starts[wall].tobytes() + mesh.ends[wall].tobytes()).digest()
    block = _WALL_BLOCKS.get(key)
    if block is None:
        block = layer_matrices(mesh, mesh.midpoints[wall], cols=wall, self_rows=np.arange(nw))
        if len(_WALL_BLOCKS) >= 8:
            _WALL_BLOCKS.pop(next(iter(_WALL_BLOCKS)))
        _WALL_BLOCKS[key] = block
    S = np.empty((n, n))
    D = np.empty((n, n))
    S[:nw, :nw], D[:nw, :nw] = block
    bodies = slice(nw, n)
    own = np.concatenate([np.full(nw, -1), np.arange(n - nw)])
    S[:, bodies], D[:, bodies] = layer_matrices(mesh, mesh.midpoints, cols=bodies, self_rows=own)
    S[bodies, :nw], D[bodies, :nw] = layer_matrices(mesh, mesh.midpoints[bodies], cols=wall)
    return S, D


class BoundaryOperators:
    """Collocation matrices and factorizations for one mesh."""

    def __init__(self, mesh: PanelMesh):
        self.mesh = mesh
        n = len(mesh)
        self.S, self.D = _collocation_matrices(mesh)
        self.dtau = _tangential_matrix(mesh)
        self.weights = mesh.lengths
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = 0.5 * np.eye(n) + self.D
        A[:n, n] = 1.0
        A[n, :n] = self.weights
        self._neumann = sla.lu_factor(A)
        self._dirichlet = None
        self._cond_checked = False

    # -- Neumann -----------------------------------------------------------
    def solve_neumann(self, data: FloatArray) -> FloatArray:
        """Boundary values of the zero-mean solution with normal derivative ``data``."""
        n = len(self.mesh)
        data = np.asarray(data, dtype=float)
        rhs = self.S @ data
        rhs = np.concatenate([rhs, np.zeros((1,) + rhs.shape[1:])], axis=0)
        sol = sla.lu_solve(self._neumann, rhs)
        return sol[:n]

    # -- Dirichlet with floating body constants ----------------------------
    def _dirichlet_factor(self):
        if self._dirichlet is None:
            mesh = self.mesh
            n, N = len(mesh), mesh.n_bodies
            A = np.zeros((n + 1 + N, n + 1 + N))
            A[:n, :n] = self.S
            A[:n, n] = 1.0
            A[n, :n] = self.weights
            for k, sl in enumerate(mesh.body_slices):
                col = 0.5 * (mesh.component == k + 1) + self.D[:, sl].sum(axis=1)
                A[:n, n + 1 + k] = -col
                A[n + 1 + k, sl] = self.weights[sl]
            self._dirichlet = sla.lu_factor(A)
        return self._dirichlet

    def solve_dirichlet(self, prescribed: FloatArray, body_flux: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Harmonic ``u`` equal to ``prescribed + C_k`` on body ``k`` and ``prescribed`` on the wall.

        The constants ``C_k`` are fixed by ``sum_{body k} f ds = body_flux[k]``.
        Returns ``(values, normal_derivative, constants)``.
        """
        mesh = self.mesh
        n, N = len(mesh), mesh.n_bodies
        prescribed = np.asarray(prescribed, dtype=float)
        body_flux = np.asarray(body_flux, dtype=float)
        rhs_top = 0.5 * prescribed + self.D @ prescribed
        extra = np.zeros((1,) + rhs_top.shape[1:])
        rhs = np.concatenate([rhs_top, extra, body_flux.reshape((N,) + rhs_top.shape[1:])], axis=0)
        sol = sla.lu_solve(self._dirichlet_factor(), rhs)
        f = sol[:n]
        C = sol[n + 1 :]
        values = prescribed.copy()
        for k, sl in enumerate(mesh.body_slices):
            values[sl] = values[sl] + C[k]
        return values, f, C

    def tangential(self, values: FloatArray) -> FloatArray:
        return self.dtau @ values


def operators(mesh: PanelMesh) -> BoundaryOperators:
    ops = mesh.cache.get("ops")
    if ops is None:
        ops = BoundaryOperators(mesh)
        mesh.cache["ops"] = ops
    return ops


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class BlobStream:
    """Free-space stream function of Gaussian vortex blobs: ``Laplacian psi = omega``."""

    positions: FloatArray
    strengths: FloatArray
    radius: float

    def _parts(self, x: FloatArray):
        d = x[:, None, :] - self.positions[None, :, :]
        r2 = np.sum(d * d, axis=-1)
        return d, r2

    def value(self, x: FloatArray) -> FloatArray:
        x = np.atleast_2d(x)
        if len(self.strengths) == 0:
            return np.zeros(len(x))
        _, r2 = self._parts(x)
        z = r2 / self.radius**2
        with np.errstate(divide="ignore"):
            core = np.where(z > 0, np.log(np.maximum(r2, 1e-300)) + exp1(np.maximum(z, 1e-300)),
                            2 * np.log(self.radius) - np.euler_gamma)
        return core @ self.strengths / (4 * np.pi)

    def gradient(self, x: FloatArray) -> FloatArray:
        x = np.atleast_2d(x)
        if len(self.strengths) == 0:
            return np.zeros((len(x), 2))
        d, r2 = self._parts(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r2 > 0, -np.expm1(-r2 / self.radius**2) / r2, 0.0)
        return np.einsum("pq,pqi,q->pi", w, d, self.strengths) / TWO_PI


@dataclass
class HarmonicField:
    """Harmonic function(s) known by boundary values and normal derivatives.

    ``values`` and ``flux`` have shape ``(n_panels,)`` or ``(n_panels, m)`` for
    ``m`` fields sharing one mesh. An optional ``particular`` part (blob stream)
    is added to the harmonic part everywhere.
    """

    mesh: PanelMesh
    values: FloatArray
    flux: FloatArray
    constants: FloatArray | None = None
    particular: BlobStream | None = None
    _dtau: FloatArray | None = field(default=None, repr=False)

    @property
    def total_values(self) -> FloatArray:
        if self.particular is None:
            return self.values
        return self.values + self.particular.value(self.mesh.midpoints)

    @property
    def total_flux(self) -> FloatArray:
        if self.particular is None:
            return self.flux
        g = self.particular.gradient(self.mesh.midpoints)
        return self.flux + np.sum(g * self.mesh.normals, axis=1)

    @property
    def tangential(self) -> FloatArray:
        """Tangential derivative of the total field at panel midpoints."""
        if self._dtau is None:
            self._dtau = operators(self.mesh).tangential(self.total_values)
        return self._dtau

    def boundary_gradient(self) -> FloatArray:
        """Full gradient at panel midpoints, shape ``(n, 2)`` or ``(n, 2, m)``."""
        f, dt = self.total_flux, self.tangential
        n, t = self.mesh.normals, self.mesh.tangents
        if f.ndim == 1:
            return f[:, None] * n + dt[:, None] * t
        return f[:, None, :] * n[:, :, None] + dt[:, None, :] * t[:, :, None]

    def __call__(self, x: FloatArray) -> FloatArray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        S, D = layer_matrices(self.mesh, x)
        out = S @ self.flux - D @ self.values
        if self.particular is not None:
            p = self.particular.value(x)
            out = out + (p if out.ndim == 1 else p[:, None])
        return out

    def gradient(self, x: FloatArray) -> FloatArray:
        """Gradient at interior points, shape ``(p, 2)`` or ``(p, 2, m)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gS, gD = layer_gradients(self.mesh, x)
        if self.values.ndim == 1:
            out = np.einsum("pni,n->pi", gS, self.flux) - np.einsum("pni,n->pi", gD, self.values)
            if self.particular is not None:
                out = out + self.particular.gradient(x)
        else:
            out = np.einsum("pni,nm->pim", gS, self.flux) - np.einsum("pni,nm->pim", gD, self.values)
            if self.particular is not None:
                out = out + self.particular.gradient(x)[:, :, None]
        return out

    def perp_gradient(self, x: FloatArray) -> FloatArray:
        g = self.gradient(x)
        return np.stack([-g[:, 1], g[:, 0]], axis=1)

    def column(self, j: int) -> HarmonicField:
        return HarmonicField(self.mesh, self.values[:, j], self.flux[:, j],
                             None if self.constants is None else self.constants[:, j])


# ---------------------------------------------------------------------------
# solves
# ---------------------------------------------------------------------------

def solve_neumann(mesh: PanelMesh, data: FloatArray, tol: float = 1e-10) -> HarmonicField:
    """Zero-boundary-mean harmonic field with normal derivative ``data`` (one column per field)."""
    data = np.asarray(data, dtype=float)
    flux = mesh.lengths @ data
    scale = np.maximum(1.0, mesh.lengths @ np.abs(data))
    if np.any(np.abs(flux) > tol * scale):
        raise ValueError(f"Neumann data violates compatibility: net flux {np.max(np.abs(flux)):.3e}")
    values = operators(mesh).solve_neumann(data)
    return HarmonicField(mesh, values, data.copy())


@dataclass
class KirchhoffSet:
    """Potentials of unit rigid motions, one column per generalized coordinate."""

    field: HarmonicField
    data: FloatArray

    def __len__(self) -> int:
        return self.data.shape[1]

    def index(self, body: int, comp: int) -> int:
        return 3 * body + comp

    @property
    def values(self) -> FloatArray:
        return self.field.values

    def added_mass(self) -> FloatArray:
        """Matrix ``M_kl = boundary integral of phi_l * K_k``."""
        return self.data.T @ (self.field.mesh.lengths[:, None] * self.field.values)


def kirchhoff(mesh: PanelMesh) -> KirchhoffSet:
    cached = mesh.cache.get("kirchhoff")
    if cached is None:
        data = mesh.rigid_data
        cached = KirchhoffSet(solve_neumann(mesh, data), data)
        mesh.cache["kirchhoff"] = cached
    return cached


def circulation_streams(mesh: PanelMesh) -> HarmonicField:
    """Stream functions with unit circulation around one body each.

    Zero on the wall, constant on each body, body fluxes ``-delta``.
    ``constants[k, j]`` is the value of stream ``j`` on body ``k``.
    """
    cached = mesh.cache.get("circulation")
    if cached is None:
        N = mesh.n_bodies
        values, f, C = operators(mesh).solve_dirichlet(np.zeros((len(mesh), N)), -np.eye(N))
        cached = HarmonicField(mesh, values, f, C)
        mesh.cache["circulation"] = cached
    return cached


def hydro_stream(mesh: PanelMesh, positions: FloatArray, strengths: FloatArray, radius: float,
                 domain: DomainSpec | None = None) -> HarmonicField:
    """Blob stream plus harmonic correction: constant on bodies, zero on the wall, zero body fluxes."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    strengths = np.asarray(strengths, dtype=float).ravel()
    n, N = len(mesh), mesh.n_bodies
    if len(strengths) == 0:
        return HarmonicField(mesh, np.zeros(n), np.zeros(n), np.zeros(N))
    if domain is not None and not np.all(domain.contains(positions)):
        raise ValueError("vortex particle outside the fluid domain")
    blob = BlobStream(positions, strengths, radius)
    bval = blob.value(mesh.midpoints)
    bflux = np.sum(blob.gradient(mesh.midpoints) * mesh.normals, axis=1)
    target_flux = np.array([-(mesh.lengths[sl] @ bflux[sl]) for sl in mesh.body_slices])
    values, f, C = operators(mesh).solve_dirichlet(-bval, target_flux)
    return HarmonicField(mesh, values, f, C, particular=blob)


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------

def fluid_mask(mesh: PanelMesh, x: FloatArray) -> NDArray[np.bool_]:
    """Points inside the outer boundary and outside every body (winding test)."""
    from matplotlib.path import Path

    x = np.atleast_2d(x)
    inside = np.zeros(len(x), bool)
    for comp, sl in enumerate(mesh.slices):
        path = Path(mesh.starts[sl])
        hit = path.contains_points(x)
        inside = hit if comp == 0 else inside & ~hit
    return inside


def grid_quadrature(mesh: PanelMesh, cell: float, sub: int = 4) -> tuple[FloatArray, FloatArray]:
    """Cartesian cells clipped to the fluid, weighted by covered area fraction.

    Cells touching the boundary are kept with their sub-sampled coverage;
    returns cell centers and weights.
    """
    lo = mesh.starts.min(axis=0)
    hi = mesh.starts.max(axis=0)
    nx = int(np.ceil((hi[0] - lo[0]) / cell))
    ny = int(np.ceil((hi[1] - lo[1]) / cell))
    xs = lo[0] + (np.arange(nx) + 0.5) * cell
    ys = lo[1] + (np.arange(ny) + 0.5) * cell
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    centers = np.column_stack([X.ravel(), Y.ravel()])
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    subpts = (centers[:, None, :] + cell * np.stack([ox.ravel(), oy.ravel()], -1)[None]).reshape(-1, 2)
    cover = fluid_mask(mesh, subpts).reshape(len(centers), -1).mean(axis=1)
    keep = cover > 0
    return centers[keep], cover[keep] * cell * cell
