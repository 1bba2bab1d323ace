"""Generalized forces on the bodies: added mass, drift force, control operators.

Sign convention.  With ``alpha`` the control potential, the solid equations read

    Q[g] + L[g] = -(Mtot q'' + Ftilde)

where ``Q[g]_k = 1/2 * int |grad alpha|^2 K_k`` over body ``k``'s boundary and
``Ftilde`` gathers every term that does not involve the control or ``q''``.
``assemble_F`` returns ``Mtot q'' + Ftilde``.

Time derivatives of the Kirchhoff potentials are Eulerian derivatives along
the current motion, computed by one centered pair of boundary solves at
``q +- h q'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geometry import BodyShape, DomainSpec, PanelMesh, build_mesh, perp
from .laplace import (BlobStream, HarmonicField, KirchhoffSet, circulation_streams, hydro_stream,
                      kirchhoff, operators)

FloatArray = NDArray[np.float64]


@dataclass
class FluidModel:
    """Discretization settings shared by every solve.

    ``resolution`` is panels per unit length; ``fd_step`` is the boundary
    displacement used for shape derivatives, relative to the domain diameter.
    """

    domain: DomainSpec
    shapes: list[BodyShape]
    resolution: float
    blob_radius: float | None = None
    fd_step: float = 1e-4
    margin: float | None = None
    _diameter: float | None = field(default=None, repr=False)

    @property
    def n_bodies(self) -> int:
        return len(self.shapes)

    @property
    def diameter(self) -> float:
        if self._diameter is None:
            self._diameter = self.domain.diameter
        return self._diameter

    @property
    def panel_length(self) -> float:
        return 1.0 / self.resolution

    @property
    def vortex_radius(self) -> float:
        return self.blob_radius if self.blob_radius is not None else 2.0 * self.panel_length

    def mesh(self, q: FloatArray, check: bool = True) -> PanelMesh:
        return build_mesh(self.domain, self.shapes, q, self.resolution, self.margin if check else None)

    def genuine_mass(self) -> FloatArray:
        d = []
        for s in self.shapes:
            d += [s.mass, s.mass, s.inertia]
        return np.diag(d)


@dataclass
class GeneralizedMass:
    """Genuine, added and total mass matrices at one pose.

    ``Madd`` is the symmetric part of the collocated matrix; the discarded
    antisymmetric part is a discretization error reported as ``asymmetry``.
    """

    Mg: FloatArray
    Madd: FloatArray
    asymmetry: float

    @property
    def Mtot(self) -> FloatArray:
        return self.Mg + self.Madd


@dataclass
class VortexData:
    """Particle positions, strengths and blob radius (a plain view of a cloud)."""

    positions: FloatArray
    strengths: FloatArray
    radius: float

    @classmethod
    def empty(cls, radius: float = 0.05) -> VortexData:
        return cls(np.zeros((0, 2)), np.zeros(0), radius)

    def __len__(self) -> int:
        return len(self.strengths)


def _raw_added_mass(kset: KirchhoffSet) -> FloatArray:
    return kset.added_mass()


def added_mass(mesh: PanelMesh) -> tuple[FloatArray, float]:
    raw = _raw_added_mass(kirchhoff(mesh))
    sym = 0.5 * (raw + raw.T)
    asym = float(np.max(np.abs(raw - raw.T)) / max(np.max(np.abs(raw)), 1e-300))
    return sym, asym


def generalized_mass(model: FluidModel, mesh: PanelMesh) -> GeneralizedMass:
    Ma, asym = added_mass(mesh)
    return GeneralizedMass(model.genuine_mass(), Ma, asym)


class FlowState:
    """Everything the force assembly needs at one state ``(q, q', gamma, cloud)``.

    Holds the mesh, Kirchhoff potentials, stream functions, the fluid velocity
    without control on the boundary and at the particles, and the Eulerian
    derivatives ``W_k`` of the Kirchhoff potentials along the motion.
    """

    def __init__(self, model: FluidModel, q: FloatArray, qdot: FloatArray, gamma: FloatArray,
                 cloud: VortexData | None = None, mesh: PanelMesh | None = None):
        self.model = model
        self.q = np.asarray(q, dtype=float)
        self.qdot = np.asarray(qdot, dtype=float)
        self.gamma = np.asarray(gamma, dtype=float).ravel()
        self.cloud = cloud if cloud is not None else VortexData.empty(model.vortex_radius)
        self.mesh = mesh if mesh is not None else model.mesh(self.q)
        m = self.mesh
        self.ops = operators(m)
        self.kset = kirchhoff(m)
        self.K = self.kset.data                     # (n, 3N)
        self.phi = self.kset.values                 # (n, 3N)
        self.dphi_tau = self.ops.tangential(self.phi)
        self.mass = generalized_mass(model, m)
        N = model.n_bodies
        # boundary normal velocity of the material boundary (zero on the wall)
        self.u_n = self.K @ self.qdot
        self.V = m.rigid_velocity(self.qdot)
        # stream part: circulation plus vorticity
        self.psi_flux = np.zeros(len(m))
        self.stream_fields: list[HarmonicField] = []
        if np.any(self.gamma != 0.0):
            circ = circulation_streams(m)
            self.psi_flux = self.psi_flux + circ.flux @ self.gamma
            self.stream_fields.append(HarmonicField(m, circ.values @ self.gamma, circ.flux @ self.gamma))
        if len(self.cloud):
            hyd = hydro_stream(m, self.cloud.positions, self.cloud.strengths, self.cloud.radius)
            self.hydro = hyd
            self.psi_flux = self.psi_flux + hyd.total_flux
            self.stream_fields.append(hyd)
        else:
            self.hydro = None
        self.Phi = self.phi @ self.qdot
        self.dPhi_tau = self.dphi_tau @ self.qdot
        # u_f . tau on every panel: potential part plus stream part (v . tau = -d_n psi)
        self.uf_tau = self.dPhi_tau - self.psi_flux
        self.uf_n = self.u_n
        self._W = None
        self._dMa = None
        self._uf_particles = None
        self._gradphi_particles = None
        self.N = N

    # ------------------------------------------------------------------
    def _motion_derivatives(self):
        """Eulerian derivatives of the Kirchhoff potentials along q' and d/dt of Ma."""
        m = self.mesh
        n3 = 3 * self.N
        if not np.any(self.qdot):
            self._W = np.zeros((len(m), n3))
            self._dMa = np.zeros((n3, n3))
            return
        speed = max(float(np.max(np.linalg.norm(self.V, axis=1))), 1e-300)
        h = self.model.fd_step * self.model.diameter / speed
        plus = self.model.mesh(self.q + h * self.qdot, check=False)
        minus = self.model.mesh(self.q - h * self.qdot, check=False)
        kp, km = kirchhoff(plus), kirchhoff(minus)
        lag = (kp.values - km.values) / (2 * h)
        # Lagrangian rate on body panels, minus transport by the boundary velocity
        grad_phi_dot_V = (np.sum(m.normals * self.V, axis=1)[:, None] * self.K
                          + np.sum(m.tangents * self.V, axis=1)[:, None] * self.dphi_tau)
        self._W = lag - grad_phi_dot_V
        Map, _ = added_mass(plus)
        Mam, _ = added_mass(minus)
        self._dMa = (Map - Mam) / (2 * h)

    @property
    def W(self) -> FloatArray:
        if self._W is None:
            self._motion_derivatives()
        return self._W

    @property
    def dMa(self) -> FloatArray:
        """Time derivative of the added-mass matrix along the current motion."""
        if self._dMa is None:
            self._motion_derivatives()
        return self._dMa

    # ------------------------------------------------------------------
    def velocity_at(self, x: FloatArray, control: HarmonicField | None = None) -> FloatArray:
        """Fluid velocity at interior points, optionally including a control potential."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pot = HarmonicField(self.mesh, self.Phi, self.K @ self.qdot)
        u = pot.gradient(x)
        for f in self.stream_fields:
            u = u + perp(f.gradient(x))
        if control is not None:
            u = u + control.gradient(x)
        return u

    def uf_particles(self) -> FloatArray:
        """Control-free fluid velocity at the particles."""
        if self._uf_particles is None:
            x = self.cloud.positions
            self._uf_particles = np.zeros((0, 2)) if len(x) == 0 else self.velocity_at(x)
        return self._uf_particles

    def gradphi_particles(self) -> FloatArray:
        if self._gradphi_particles is None:
            x = self.cloud.positions
            if len(x) == 0:
                self._gradphi_particles = np.zeros((0, 2, 3 * self.N))
            else:
                self._gradphi_particles = self.kset.field.gradient(x)
        return self._gradphi_particles

    def body_weight(self) -> FloatArray:
        """Quadrature weights restricted to body panels."""
        return np.where(self.mesh.body_mask, self.mesh.lengths, 0.0)

    def own_body_weight(self) -> FloatArray:
        """``K_k`` times panel length, already zero away from body ``k``."""
        return self.K * self.mesh.lengths[:, None]

    # ------------------------------------------------------------------
    def Ftilde(self) -> FloatArray:
        """Force terms independent of the control and of q''."""
        w = self.body_weight()
        KW = self.own_body_weight()
        out = self.dMa @ self.qdot
        out -= self.W.T @ (w * self.u_n)
        # u_f . grad phi_k on bodies: normal and tangential parts
        uf_dot_gphi = self.uf_n[:, None] * self.K + self.uf_tau[:, None] * self.dphi_tau
        out -= uf_dot_gphi.T @ (w * self.u_n)
        out += 0.5 * KW.T @ (self.uf_n**2 + self.uf_tau**2)
        if len(self.cloud):
            uf = self.uf_particles()
            gphi = self.gradphi_particles()
            out += np.einsum("p,pi,pik->k", self.cloud.strengths, perp(uf), gphi)
        return out

    def assemble_F(self, qddot: FloatArray) -> FloatArray:
        return self.mass.Mtot @ np.asarray(qddot, dtype=float) + self.Ftilde()

    # ------------------------------------------------------------------
    def control_fields(self, g: FloatArray) -> HarmonicField:
        """Control potentials for Neumann data ``g`` (columns), zero off Sigma."""
        g = np.asarray(g, dtype=float)
        return HarmonicField(self.mesh, self.ops.solve_neumann(g), g)

    def gram(self, alpha: HarmonicField) -> FloatArray:
        """``G[k, i, j] = int over body k of d_tau alpha_i d_tau alpha_j K_k``, shape (3N, m, m)."""
        T = alpha.tangential
        if T.ndim == 1:
            T = T[:, None]
        bm = self.mesh.body_mask
        Tb = T[bm]
        KW = self.own_body_weight()[bm]
        return np.stack([(Tb * KW[:, k : k + 1]).T @ Tb for k in range(KW.shape[1])])

    def Q(self, alpha: HarmonicField) -> FloatArray:
        """Quadratic operator for a single control field."""
        T = alpha.tangential
        return 0.5 * self.own_body_weight().T @ (T * T)

    def L_matrix(self, alpha: HarmonicField) -> FloatArray:
        """Linear operator applied to each control column, shape (3N, m)."""
        T = alpha.tangential
        if T.ndim == 1:
            T = T[:, None]
        g = alpha.flux if alpha.flux.ndim == 2 else alpha.flux[:, None]
        m = self.mesh
        w = self.body_weight()
        KW = self.own_body_weight()
        # int over body k of (u_f . grad alpha) K_k   (grad alpha is tangential there)
        out = KW.T @ (self.uf_tau[:, None] * T)
        # - int over Sigma of g W_k
        sig_w = np.where(m.sigma, m.lengths, 0.0)
        out -= self.W.T @ (sig_w[:, None] * g)
        # - int over bodies of (grad alpha . grad phi_k) u_n
        out -= self.dphi_tau.T @ ((w * self.u_n)[:, None] * T)
        if len(self.cloud):
            x = self.cloud.positions
            ga = alpha.gradient(x)
            if ga.ndim == 2:
                ga = ga[:, :, None]
            gperp = np.stack([-ga[:, 1], ga[:, 0]], axis=1)
            out += np.einsum("p,pim,pik->km", self.cloud.strengths, gperp, self.gradphi_particles())
        return out

    def particle_velocity(self, alpha: HarmonicField | None = None, coef: FloatArray | None = None) -> FloatArray:
        """Full velocity at particles: control-free part plus the control gradient."""
        u = self.uf_particles().copy()
        if alpha is not None and len(self.cloud):
            ga = alpha.gradient(self.cloud.positions)
            u += ga if ga.ndim == 2 else ga @ coef
        return u

    def kinetic_energy(self) -> float:
        """Body plus potential-flow kinetic energy ``q'^T Mtot q' / 2``."""
        return 0.5 * float(self.qdot @ self.mass.Mtot @ self.qdot)

    def circulations(self) -> FloatArray:
        """Measured circulation of the control-free field around each body."""
        m = self.mesh
        return np.array([float(m.lengths[sl] @ self.uf_tau[sl]) for sl in m.body_slices])


# ---------------------------------------------------------------------------
# functional front ends
# ---------------------------------------------------------------------------

def assemble_Q(state: FlowState, g: FloatArray) -> FloatArray:
    return state.Q(state.control_fields(g))


def assemble_L(state: FlowState, g: FloatArray) -> FloatArray:
    return state.L_matrix(state.control_fields(g))[:, 0] if np.ndim(g) == 1 else state.L_matrix(state.control_fields(g))


def assemble_Ftilde(state: FlowState) -> FloatArray:
    return state.Ftilde()


def assemble_F(state: FlowState, qddot: FloatArray) -> FloatArray:
    return state.assemble_F(qddot)


def uncontrolled_acceleration(state: FlowState) -> FloatArray:
    return -np.linalg.solve(state.mass.Mtot, state.Ftilde())
