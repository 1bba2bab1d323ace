"""Feedback synthesis: boundary controls that impose a prescribed body acceleration.

Pipeline at a pose ``q``:

1. ``build_basis``: zero-mean modes on the control arc.
2. ``project_Cb``: keep combinations whose potentials are orthogonal to
   every Kirchhoff Neumann datum (this removes the time-derivative term).
3. ``caratheodory``: boundary points ``x_i`` and positive weights so that
   ``sum_i mu_i(q, v) e_i(q) = v`` for every ``v``.
4. ``concentrate``: coefficients of ``M = (3N+1)^2`` controls whose Gram
   tensor is close to ``delta_ij e_i``.
5. ``nontrivial_zero``: unit ``Xbar`` with ``Q(Xbar) = 0``.
6. ``right_inverse``: right inverse of ``DQ(Xbar)``.
7. ``scaling_solve``: ``X`` with ``Q(X) + L X = y`` via a scaled contraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

from .dynamics import FlowState
from .geometry import BodyShape, PanelMesh, perp
from .laplace import HarmonicField

FloatArray = NDArray[np.float64]


class SynthesisError(RuntimeError):
    """A stage of the control synthesis failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# basis and constraints
# ---------------------------------------------------------------------------

def build_basis(mesh: PanelMesh, n_modes: int) -> FloatArray:
    """Orthonormal zero-mean sine modes on the control arc, shape (n_panels, n_modes).

    Sines ``sin(m pi s)`` for ``m = 1..n_modes+1`` vanish at the arc ends; the
    mean is projected out and the set orthonormalized in the panel-weighted
    inner product, which leaves ``n_modes`` functions.
    """
    sig = np.flatnonzero(mesh.sigma)
    if len(sig) < n_modes + 1:
        raise SynthesisError("basis", f"control arc has {len(sig)} panels, need more than {n_modes}")
    s = mesh.sigma_s[sig]
    w = mesh.lengths[sig]
    raw = np.sin(np.pi * np.outer(s, np.arange(1, n_modes + 2)))
    raw -= np.outer(np.ones(len(sig)), (w @ raw) / w.sum())
    qmat, rmat = np.linalg.qr(np.sqrt(w)[:, None] * raw)
    d = np.sign(np.diag(rmat))
    d[d == 0] = 1.0
    qmat = qmat * d
    out = np.zeros((len(mesh), n_modes))
    out[sig] = qmat[:, :n_modes] / np.sqrt(w)[:, None]
    return out


def constraint_matrix(state: FlowState, alpha_values: FloatArray) -> FloatArray:
    """``C[k, m] = int alpha_m K_k`` over body boundaries."""
    return state.K.T @ (state.mesh.lengths[:, None] * alpha_values)


def project_Cb(C: FloatArray, rtol: float = 1e-12) -> FloatArray:
    """Orthonormal basis of the kernel of the constraint matrix ``C`` (columns)."""
    _, s, vt = np.linalg.svd(C)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300)))
    if rank < C.shape[0]:
        raise SynthesisError("project", f"constraint matrix has rank {rank} < {C.shape[0]}")
    return vt[rank:].T


def reproject(P: FloatArray, C: FloatArray) -> FloatArray:
    """Smallest correction of coefficient columns ``P`` into the kernel of ``C``."""
    return P - np.linalg.pinv(C) @ (C @ P)


# ---------------------------------------------------------------------------
# Caratheodory data
# ---------------------------------------------------------------------------

def body_frame_data(shape: BodyShape, n_panels: int) -> FloatArray:
    """Rigid-motion Neumann data ``(n_x, n_y, X_perp . n)`` per panel in the body frame."""
    pts = shape.local_points(n_panels)
    nxt = np.roll(pts, -1, axis=0)
    t = nxt - pts
    t /= np.linalg.norm(t, axis=1)[:, None]
    n = perp(t)
    mid = 0.5 * (pts + nxt)
    return np.column_stack([n, np.sum(perp(mid) * n, axis=1)])


def inscribed_radius(vectors: FloatArray) -> float:
    """Radius of the largest origin-centered ball inside the convex hull (<= 0 if outside)."""
    try:
        hull = ConvexHull(vectors)
    except Exception:
        return 0.0
    return float(np.min(-hull.equations[:, -1]))


@dataclass
class ConcentrationData:
    """Target points, their Neumann vectors and positive weights.

    ``panels[i, k]`` is the panel (within body ``k``) of point ``x_i^k``;
    ``e_ref`` holds the vectors ``e_i`` at zero body angles; ``lam`` the
    positive weights; ``r`` the radius used in the decomposition.
    """

    panels: NDArray[np.int64]
    e_ref: FloatArray
    lam: FloatArray
    r: float
    r_ball: float
    n_bodies: int

    @property
    def size(self) -> int:
        return len(self.lam)

    @property
    def group(self) -> NDArray[np.int64]:
        return np.arange(self.size) // (3 * self.n_bodies + 1)

    def rotation(self, q: FloatArray) -> FloatArray:
        R = np.zeros((3 * self.n_bodies, 3 * self.n_bodies))
        for k in range(self.n_bodies):
            c, s = np.cos(q[3 * k + 2]), np.sin(q[3 * k + 2])
            R[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
        return R

    def e(self, q: FloatArray) -> FloatArray:
        """Vectors ``e_i(q)``, shape (M, 3N)."""
        return self.e_ref @ self.rotation(q).T

    def _lam_ell(self, w: FloatArray) -> FloatArray:
        root = np.sqrt(1.0 + w @ w)
        return np.concatenate([w + root, [root]])

    def mu(self, q: FloatArray, v: FloatArray) -> FloatArray:
        """Positive weights with ``sum_i mu_i e_i(q) = v``."""
        w = self.rotation(q).T @ np.asarray(v, dtype=float)
        return self.lam * self._lam_ell(w)[self.group] / self.r

    def dmu(self, q: FloatArray, v: FloatArray) -> FloatArray:
        """Jacobian of ``mu`` with respect to ``v``, shape (M, 3N)."""
        Rot = self.rotation(q)
        w = Rot.T @ np.asarray(v, dtype=float)
        d = len(w)
        root = np.sqrt(1.0 + w @ w)
        J = np.vstack([np.eye(d), np.zeros((1, d))]) + (w / root)[None, :]
        return (self.lam / self.r)[:, None] * (J[self.group] @ Rot.T)

    def mu_linear(self, q: FloatArray) -> FloatArray:
        """Linear part of ``mu``: matrix ``B`` with ``sum_i (B v)_i e_i(q) = v``."""
        d = 3 * self.n_bodies
        sel = np.vstack([np.eye(d), np.zeros((1, d))])[self.group]
        return (self.lam / self.r)[:, None] * (sel @ self.rotation(q).T)


def _lp_weights(vectors: FloatArray, target: FloatArray, cost: FloatArray) -> FloatArray:
    n = len(vectors)
    A = np.vstack([vectors.T, np.ones((1, n))])
    b = np.concatenate([target, [1.0]])
    res = linprog(cost, A_eq=A, b_eq=b, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise SynthesisError("caratheodory", f"LP infeasible for target {target}: {res.message}")
    lam = np.where(res.x > 1e-13, res.x, 0.0)
    return lam


def caratheodory(shapes: list[BodyShape], n_panels: list[int], seed: int = 0) -> ConcentrationData:
    """Points and weights representing every ``r b_l`` as a convex combination.

    The directions are the canonical basis vectors and ``-(1, ..., 1)``. Each
    body is handled by its own LP (the hull of a product set is the product of
    hulls); per-body supports are coupled by the north-west corner rule, which
    keeps at most ``3N + 1`` points per direction. Degenerate solutions are
    retried with seeded perturbations of the cost and, failing that, padded by
    splitting a positive weight over a repeated point.
    """
    N = len(shapes)
    d = 3 * N
    vecs = [body_frame_data(s, n) for s, n in zip(shapes, n_panels)]
    radii = [inscribed_radius(v) for v in vecs]
    r_ball = float(min(radii))
    if r_ball <= 0:
        raise SynthesisError("caratheodory", f"conical hull not full (inscribed radius {r_ball:.3e}); shape too close to a disk")
    r = r_ball / np.sqrt(3.0) * (1 - 1e-9)
    directions = [np.eye(d)[l] for l in range(d)] + [-np.ones(d)]
    rng = np.random.default_rng(seed)
    panels, lam_all, e_all = [], [], []
    for b in directions:
        for attempt in range(8):
            supports = []
            for k in range(N):
                n = len(vecs[k])
                cost = np.arange(n) / n * 1e-6 if attempt == 0 else rng.random(n)
                lam = _lp_weights(vecs[k], r * b[3 * k : 3 * k + 3], cost)
                idx = np.flatnonzero(lam > 0)
                supports.append((idx, lam[idx]))
            tuples = _northwest_corner(supports)
            if len(tuples) == d + 1:
                break
        while len(tuples) < d + 1:
            # split the largest weight over a repeated tuple
            j = int(np.argmax([t[1] for t in tuples]))
            pts, w = tuples[j]
            tuples[j] = (pts, 0.5 * w)
            tuples.append((pts, 0.5 * w))
        for pts, w in tuples:
            panels.append(pts)
            lam_all.append(w)
            e_all.append(np.concatenate([vecs[k][pts[k]] for k in range(N)]))
    return ConcentrationData(np.array(panels, dtype=np.int64), np.array(e_all), np.array(lam_all), r, r_ball, N)


def _northwest_corner(supports):
    """Couple per-body weight vectors (each summing to one) into joint tuples."""
    N = len(supports)
    ptr = [0] * N
    rem = [w.copy() for _, w in supports]
    out = []
    while all(ptr[k] < len(supports[k][0]) for k in range(N)):
        amount = min(rem[k][ptr[k]] for k in range(N))
        out.append((tuple(int(supports[k][0][ptr[k]]) for k in range(N)), float(amount)))
        for k in range(N):
            rem[k][ptr[k]] -= amount
        for k in range(N):
            if rem[k][ptr[k]] <= 1e-14:
                ptr[k] += 1
    return [(np.array(t), w) for t, w in out if w > 1e-14]


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------

@dataclass
class TraceSpace:
    """Well-conditioned coordinates for the body traces of constrained controls.

    ``coef`` maps reduced coordinates to raw-mode coefficients; ``H[k]`` is the
    Gram form of body weight ``K_k`` in reduced coordinates.
    """

    coef: FloatArray
    trace: FloatArray
    H: FloatArray
    singular_values: FloatArray


def trace_space(state: FlowState, basis: FloatArray, alpha_raw: FloatArray, cutoff: float) -> TraceSpace:
    C = constraint_matrix(state, alpha_raw)
    Z = project_Cb(C)
    T = state.ops.tangential(alpha_raw @ Z)
    bm = state.mesh.body_mask
    w = state.mesh.lengths[bm]
    Tb = T[bm]
    _, s, vt = np.linalg.svd(np.sqrt(w)[:, None] * Tb, full_matrices=False)
    keep = s > cutoff * s[0]
    scale = vt[keep].T / s[keep]
    trace = Tb @ scale
    KW = state.K[bm] * w[:, None]
    H = np.einsum("na,nk,nb->kab", trace, KW, trace, optimize=True)
    return TraceSpace(Z @ scale, trace, H, s)


def gram_residual(H: FloatArray, A: FloatArray, E: FloatArray) -> FloatArray:
    """``G[k, i, j] - delta_ij E[i, k]`` for coefficient columns ``A``."""
    G = np.einsum("ai,kab,bj->kij", A, H, A, optimize=True)
    idx = np.arange(A.shape[1])
    G[:, idx, idx] -= E.T
    return G


@dataclass
class ConcentrationResult:
    coef: FloatArray          # raw-mode coefficients, (K, M)
    nu: float
    rms: float
    n_reduced: int
    evaluations: int


def _bump_init(state: FlowState, space: TraceSpace, cdata: ConcentrationData, width: float) -> FloatArray:
    m = state.mesh
    bm = m.body_mask
    w = m.lengths[bm]
    comp = m.component[bm]
    M = cdata.size
    bumps = np.zeros((len(w), M))
    for k in range(cdata.n_bodies):
        local = np.flatnonzero(comp == k + 1)
        s = np.cumsum(w[local]) - 0.5 * w[local]
        per = w[local].sum()
        for i in range(M):
            d = np.abs(s - s[cdata.panels[i, k]])
            d = np.minimum(d, per - d)
            b = np.exp(-(d / width) ** 2)
            bumps[local, i] = b / np.sqrt(np.sum(w[local] * b * b))
    # trace basis is orthonormal in the weighted inner product
    return space.trace.T @ (w[:, None] * bumps)


def concentrate(state: FlowState, basis: FloatArray, alpha_raw: FloatArray, cdata: ConcentrationData,
                cutoff: float = 1e-8, max_evals: int = 400, warm: FloatArray | None = None,
                nu_stop: float = 0.0, minimax_rounds: int = 0) -> ConcentrationResult:
    """Coefficients of ``M`` controls with Gram tensor close to ``delta_ij e_i``.

    Levenberg-Marquardt on the stacked upper-triangular Gram residual in
    well-conditioned trace coordinates. ``warm`` gives raw coefficients of
    a previous solution to start from.
    """
    space = trace_space(state, basis, alpha_raw, cutoff)
    H = space.H
    Kp = H.shape[1]
    M = cdata.size
    E = cdata.e(state.q)
    if warm is not None:
        T = state.ops.tangential(alpha_raw @ warm)[state.mesh.body_mask]
        w = state.mesh.lengths[state.mesh.body_mask]
        A0 = space.trace.T @ (w[:, None] * T)
    else:
        per = np.mean([state.mesh.lengths[sl].sum() for sl in state.mesh.body_slices])
        A0 = _bump_init(state, space, cdata, 0.5 * per / M)
    A, nfev = levenberg_marquardt(H, A0, E, max_evals, nu_stop)
    iu, ju = np.triu_indices(M)
    if minimax_rounds and np.max(np.abs(gram_residual(H, A, E)[:, iu, ju])) > nu_stop:
        A, more = minimax_refine(H, A, E, iters=minimax_rounds)
        nfev += more
    res = gram_residual(H, A, E)[:, iu, ju].ravel()
    return ConcentrationResult(space.coef @ A, float(np.max(np.abs(res))), float(np.sqrt(np.mean(res**2))), Kp, nfev)


def _normal_equations(H: FloatArray, A: FloatArray, Rfull: FloatArray, weights: FloatArray | None,
                      grad_weights: FloatArray | None = None) -> tuple[FloatArray, FloatArray]:
    """``J^T W J`` and ``J^T V r`` for the upper-triangular Gram residual, assembled blockwise.

    Unknowns are ordered column by column (``A[:, 0]``, then ``A[:, 1]``, ...).
    ``weights`` (``W``) is symmetric with the residual's shape, or None for all
    ones; ``grad_weights`` (``V``) defaults to ``W``.
    """
    Kp, M = A.shape
    nk = H.shape[0]
    U = np.einsum("kab,bj->kaj", H, A)                      # (nk, Kp, M)
    # block (i, j), i != j: sum_k w_ij U_j U_i^T
    if weights is None:
        JtJ = np.tensordot(U, U, axes=([0], [0])).transpose(3, 0, 1, 2)
    else:
        JtJ = np.zeros((M, Kp, M, Kp))
        for k in range(nk):
            JtJ += np.multiply.outer(U[k], U[k]).transpose(3, 0, 1, 2) * weights[k][:, None, :, None]
    JtJ = np.ascontiguousarray(JtJ).reshape(M * Kp, M * Kp)
    # block (i, i): sum_k (sum_j w_ij U_j U_j^T + 3 w_ii U_i U_i^T)
    w = np.ones((nk, M, M)) if weights is None else weights
    idx = np.arange(M)
    for i in range(M):
        blk = slice(i * Kp, (i + 1) * Kp)
        Ui = U[:, :, i]
        JtJ[blk, blk] = np.einsum("kj,kaj,kbj->ab", w[:, i, :], U, U) + 3.0 * (w[:, i, i, None] * Ui).T @ Ui
    WR = (w if grad_weights is None else grad_weights) * Rfull
    WR[:, idx, idx] *= 2.0
    Jtr = np.einsum("kaj,kji->ia", U, WR).ravel()
    return JtJ, Jtr


def levenberg_marquardt(H: FloatArray, A0: FloatArray, E: FloatArray, max_iter: int, nu_stop: float = 0.0,
                        weights: FloatArray | None = None) -> tuple[FloatArray, int]:
    """Minimize the weighted squared upper-triangular Gram residual over coefficient columns ``A``."""
    Kp, M = A0.shape
    iu, ju = np.triu_indices(M)
    wu = None if weights is None else weights[:, iu, ju]

    def cost_of(A):
        R = gram_residual(H, A, E)
        r2 = R[:, iu, ju] ** 2
        return 0.5 * float(np.sum(r2 if wu is None else wu * r2)), R

    A = A0.copy()
    cost, R = cost_of(A)
    lam = 1e-3
    evals = 1
    for _ in range(max_iter):
        if np.max(np.abs(R[:, iu, ju])) <= nu_stop:
            break
        JtJ, Jtr = _normal_equations(H, A, R, weights)
        diag = np.maximum(np.diag(JtJ), 1e-12 * max(np.max(np.diag(JtJ)), 1e-300))
        improved = False
        for _ in range(12):
            try:
                cf = np.linalg.cholesky(JtJ + lam * np.diag(diag))
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = -np.linalg.solve(cf.T, np.linalg.solve(cf, Jtr))
            trial = A + step.reshape(M, Kp).T
            c_new, R_new = cost_of(trial)
            evals += 1
            if c_new < cost:
                A, R = trial, R_new
                rel = (cost - c_new) / max(cost, 1e-300)
                cost = c_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved or rel < 1e-12:
            break
    return A, evals


def minimax_refine(H: FloatArray, A: FloatArray, E: FloatArray, powers=(2, 4, 8), iters: int = 30
                   ) -> tuple[FloatArray, int]:
    """Lower the largest Gram residual by minimizing ``sum r^(2p)`` for increasing ``p``."""
    M = A.shape[1]
    iu, ju = np.triu_indices(M)

    def upper(A):
        return gram_residual(H, A, E)[:, iu, ju]

    best, best_nu, evals = A, float(np.max(np.abs(upper(A)))), 0
    for p in powers:
        scale = max(float(np.max(np.abs(upper(A)))), 1e-300)
        cost = float(np.sum((upper(A) / scale) ** (2 * p)))
        lam = 1e-3
        for _ in range(iters):
            R = gram_residual(H, A, E) / scale
            r2 = R * R
            hess_w = p * p * r2 ** (p - 1)
            grad_w = p * r2 ** (p - 1)
            JtJ, Jtr = _normal_equations(H, A, R, hess_w, grad_w)
            JtJ /= scale  # R carries 1/scale, the Jacobian does not
            diag = np.maximum(np.diag(JtJ), 1e-12 * max(np.max(np.diag(JtJ)), 1e-300))
            moved = False
            for _ in range(10):
                try:
                    cf = np.linalg.cholesky(JtJ + lam * np.diag(diag))
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                step = -np.linalg.solve(cf.T, np.linalg.solve(cf, Jtr))
                trial = A + step.reshape(M, -1).T
                evals += 1
                c_new = float(np.sum((upper(trial) / scale) ** (2 * p)))
                if c_new < cost:
                    rel = (cost - c_new) / cost
                    A, cost, moved = trial, c_new, True
                    lam = max(lam / 3.0, 1e-12)
                    break
                lam *= 4.0
            if not moved or rel < 1e-10:
                break
            nu = float(np.max(np.abs(upper(A))))
            if nu < best_nu:
                best, best_nu = A, nu
    return best, evals


# ---------------------------------------------------------------------------
# quadratic operator tools
# ---------------------------------------------------------------------------

def quad(G: FloatArray, X: FloatArray) -> FloatArray:
    """``Q(X)_k = 1/2 X^T G_k X``."""
    return 0.5 * np.einsum("kij,i,j->k", G, X, X)


def dquad(G: FloatArray, X: FloatArray) -> FloatArray:
    """Derivative of ``quad`` at ``X``, shape (d, M)."""
    return np.einsum("kij,j->ki", G, X)


def transfer_map(G: FloatArray, cdata: ConcentrationData, q: FloatArray, v: FloatArray) -> FloatArray:
    """``T(v) = sum_ij sqrt(mu_i mu_j) G_ij``."""
    s = np.sqrt(cdata.mu(q, v))
    return np.einsum("kij,i,j->k", G, s, s)


def nontrivial_zero(G: FloatArray, cdata: ConcentrationData, q: FloatArray, v0: FloatArray | None = None,
                    max_iter: int = 50, tol: float = 1e-13) -> tuple[FloatArray, FloatArray, str]:
    """Unit ``Xbar`` with ``Q(Xbar) = 0``; returns ``(Xbar, v, method)``.

    First ``Xbar = sqrt(mu(v))/|sqrt(mu(v))|`` with ``T(v) = 0`` by damped
    Newton from ``v0``. When the Gram tensor is too far from ``delta_ij e_i``
    for that to converge, the best such ``Xbar`` seeds a minimum-norm Newton
    solve of ``Q(X) = 0, |X| = 1``.
    """
    d = G.shape[0]
    v = np.zeros(d) if v0 is None else np.asarray(v0, dtype=float).copy()
    ok, v = _newton_T(G, cdata, q, v, max_iter, tol)
    s = np.sqrt(cdata.mu(q, v))
    X = s / np.linalg.norm(s)
    if ok:
        return X, v, "transfer"
    scale = max(1.0, float(np.max(np.abs(G))))
    for _ in range(max_iter):
        f = np.concatenate([quad(G, X), [0.5 * (X @ X - 1.0)]])
        if np.linalg.norm(f) <= tol * scale:
            return X, v, "sphere"
        J = np.vstack([dquad(G, X), X[None, :]])
        step = -np.linalg.lstsq(J, f, rcond=None)[0]
        t = 1.0
        while t > 1e-6:
            Xn = X + t * step
            fn = np.concatenate([quad(G, Xn), [0.5 * (Xn @ Xn - 1.0)]])
            if np.linalg.norm(fn) < (1 - 0.25 * t) * np.linalg.norm(f):
                break
            t *= 0.5
        else:
            break
        X = Xn
    f = quad(G, X)
    if np.linalg.norm(f) <= tol * scale:
        return X / np.linalg.norm(X), v, "sphere"
    raise SynthesisError("zero", f"no zero of Q found, residual {np.linalg.norm(f):.3e}")


def _newton_T(G, cdata, q, v, max_iter, tol):
    scale = max(1.0, float(np.max(np.abs(G))))
    f = transfer_map(G, cdata, q, v)
    best = (np.linalg.norm(f), v)
    for _ in range(max_iter):
        nf = np.linalg.norm(f)
        if nf <= tol * scale:
            return True, v
        mu = cdata.mu(q, v)
        s = np.sqrt(mu)
        ds = cdata.dmu(q, v) / (2 * s)[:, None]
        J = 2 * np.einsum("kij,i,jl->kl", G, s, ds)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            vn = v + t * step
            fn = transfer_map(G, cdata, q, vn)
            if np.linalg.norm(fn) < (1 - 0.25 * t) * nf:
                break
            t *= 0.5
        else:
            break
        v, f = vn, fn
        if np.linalg.norm(f) < best[0]:
            best = (np.linalg.norm(f), v)
    if np.linalg.norm(f) <= tol * scale:
        return True, v
    return False, best[1]


@dataclass
class RightInverse:
    matrix: FloatArray       # (M, d)
    defect: float            # norm of DQ A - Id before correction
    residual: float          # norm of DQ A_corrected - Id
    kind: str = "structured"  # or "pinv" when the structured inverse degraded


def right_inverse(G: FloatArray, Xbar: FloatArray, cdata: ConcentrationData, q: FloatArray) -> RightInverse:
    """``A (Id + E)^-1`` with ``A v = mu_lin(v) / Xbar`` and ``E = DQ(Xbar) A - Id``.

    The correction is a direct solve, so only invertibility of ``Id + E`` is needed.
    Once ``|E| >= 1`` or the result is much longer than the pseudo-inverse of
    ``DQ(Xbar)`` (a small entry of ``Xbar`` inflates ``A``), the minimum-norm
    right inverse is used instead; a long ``R`` shrinks the contraction radius.
    """
    J = dquad(G, Xbar)
    A = cdata.mu_linear(q) / Xbar[:, None]
    d = J.shape[0]
    IE = J @ A
    defect = float(np.linalg.norm(IE - np.eye(d), 2))
    pinv = np.linalg.pinv(J)
    kind = "structured"
    if np.linalg.cond(IE) > 1e12:
        if np.linalg.cond(J) > 1e12:
            raise SynthesisError("right_inverse", f"Id + E is singular (|E| = {defect:.3g})")
        Rm, kind = pinv, "pinv"
    else:
        Rm = A @ np.linalg.inv(IE)
        if defect >= 1.0 or np.linalg.norm(Rm, 2) > 10.0 * np.linalg.norm(pinv, 2):
            Rm, kind = pinv, "pinv"
    res = float(np.linalg.norm(J @ Rm - np.eye(d), 2))
    if res > 1e-8:
        raise SynthesisError("right_inverse", f"corrected right inverse residual {res:.3e}")
    return RightInverse(Rm, defect, res, kind)


def contraction_radius(G: FloatArray, rinv: FloatArray, n_samples: int = 8, seed: int = 0) -> float:
    """Radius on which the chord iteration contracts, from sampled norms of ``DQ(R u) R``.

    ``Df(x) - Df(0) = DQ(R x) R`` is linear in ``x``; its size over unit
    directions (coordinate axes plus seeded random ones) bounds the Lipschitz
    constant ``l``, and ``r = 1 / (8 l)`` keeps ``|Df(x) - Df(0)| <= 1/4``.
    """
    d = rinv.shape[1]
    rng = np.random.default_rng(seed)
    dirs = np.vstack([np.eye(d), rng.normal(size=(n_samples, d))])
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    lip = max(np.linalg.norm(dquad(G, rinv @ u) @ rinv, 2) for u in dirs)
    return 1.0 / (8.0 * max(lip, 1e-300))


@dataclass
class ScalingResult:
    X: FloatArray
    residual: float
    eps: float
    iterations: int


def newton_polish(G: FloatArray, Lmat: FloatArray, X: FloatArray, y: FloatArray, limit: float,
                  steps: int = 8) -> FloatArray:
    """Minimum-norm Newton corrections on ``Q(X) + L X = y`` until the residual is below ``limit``."""
    for _ in range(steps):
        r = quad(G, X) + Lmat @ X - y
        if np.linalg.norm(r) <= limit:
            break
        J = dquad(G, X) + Lmat
        X = X - J.T @ np.linalg.solve(J @ J.T, r)
    return X


def scaling_solve(G: FloatArray, Lmat: FloatArray, Xbar: FloatArray, rinv: FloatArray, y: FloatArray,
                  eps0: float = 0.5, tol: float = 1e-8, max_iter: int = 200, halvings: int = 4,
                  radius: float | None = None) -> ScalingResult:
    """Solve ``Q(X) + L X = y`` near the ray through ``Xbar``.

    With ``f(x) = (Q + eps L)(Xbar + R x)`` the chord iteration
    ``x <- x + Df(0)^-1 (eps^2 y - f(x))`` converges for small ``eps``; then
    ``X = (Xbar + R x) / eps``. The scale is ``eps(y) = min(eps0, sqrt(rho) / (1 + |y|^2)^(1/4))``
    where ``rho`` is a sampled contraction radius; ``eps0`` is halved on failure.
    """
    y = np.asarray(y, dtype=float)
    d = len(y)
    Lmat = np.asarray(Lmat, dtype=float)
    LR = Lmat @ rinv
    rho = radius if radius is not None else contraction_radius(G, rinv)
    eps0 = min(eps0, 0.5 / max(np.linalg.norm(LR, 2), 1e-300))
    e_cap = eps0
    last = np.inf
    target_tol = tol * (1.0 + np.linalg.norm(y))
    for _ in range(halvings + 1):
        eps = min(e_cap, np.sqrt(rho) / (1.0 + y @ y) ** 0.25)
        D0 = np.eye(d) + eps * LR
        try:
            D0inv = np.linalg.inv(D0)
        except np.linalg.LinAlgError:
            e_cap *= 0.5
            continue
        x = np.zeros(d)
        tgt = eps * eps * y
        prev = np.inf
        for it in range(1, max_iter + 1):
            X = Xbar + rinv @ x
            r = quad(G, X) + eps * (Lmat @ X) - tgt
            nr = np.linalg.norm(r) / (eps * eps)
            if nr <= target_tol:
                return ScalingResult(X / eps, nr, eps, it)
            if not np.isfinite(nr) or (it > 3 and nr > 0.9 * prev):
                if np.isfinite(nr) and nr < 1e-3 * (1.0 + np.linalg.norm(y)):
                    # roundoff floor of the scaled residual; finish on the unscaled system
                    Z = newton_polish(G, Lmat, X / eps, y, target_tol)
                    nz = np.linalg.norm(quad(G, Z) + Lmat @ Z - y)
                    if nz <= target_tol:
                        return ScalingResult(Z, nz, eps, it)
                break
            prev = nr
            x = x - D0inv @ r
        last = nr
        e_cap = 0.5 * eps
    raise SynthesisError("scaling", f"contraction failed, last residual {last:.3e}")


def reduce_norm(G: FloatArray, Lmat: FloatArray, X: FloatArray, y: FloatArray, tol: float = 1e-12,
                max_iter: int = 100) -> FloatArray:
    """Move a solution of ``Q(X) + L X = y`` along the solution set towards smaller ``|X|``.

    Each step aims at the least-norm point of the linearized constraint and is
    pulled back onto the exact solution set by minimum-norm Newton corrections;
    it is accepted only if the norm drops and the residual stays below
    ``tol (1 + |y|)``. Large coefficients amplify roundoff in the force
    evaluation, so this keeps the emitted control well conditioned.
    """
    y = np.asarray(y, dtype=float)
    limit = tol * (1.0 + np.linalg.norm(y))

    def resid(Z):
        return quad(G, Z) + Lmat @ Z - y

    def restore(Z):
        return newton_polish(G, Lmat, Z, y, 0.01 * limit)

    for _ in range(max_iter):
        J = dquad(G, X) + Lmat
        d = -X + J.T @ np.linalg.solve(J @ J.T, J @ X - resid(X))
        n0 = np.linalg.norm(X)
        t = 1.0
        while t > 1e-4:
            trial = restore(X + t * d)
            if np.linalg.norm(resid(trial)) <= limit and np.linalg.norm(trial) < n0 * (1 - 1e-3 * t):
                break
            t *= 0.5
        else:
            break
        X = trial
        if np.linalg.norm(X) > n0 * (1 - 1e-3):
            break
    return X


# ---------------------------------------------------------------------------
# feedback law
# ---------------------------------------------------------------------------

@dataclass
class ControlSettings:
    """Knobs of the synthesis; defaults suit a single body."""

    n_modes: int | None = None           # raw modes on the arc; default 4 (3N+1)^2
    cutoff: float = 1e-6                 # relative singular-value cutoff for body traces
    nu_target: float = 0.2               # stop optimizing once the Gram residual is below this
    max_iter: int = 100                  # least-squares iterations for a fresh synthesis
    refine_iter: int = 30                # minimax iterations per power
    warm_iter: int = 10                  # iterations when re-synthesizing from a nearby pose
    cache_threshold: float = 0.02        # pose distance that triggers re-synthesis
    eps0: float = 0.1
    tol: float = 1e-8
    seed: int = 0
    reduce_norm: bool = True             # shrink the solution along the solution set

    def modes(self, n_bodies: int) -> int:
        return self.n_modes if self.n_modes is not None else 4 * (3 * n_bodies + 1) ** 2


@dataclass
class CacheEntry:
    q: FloatArray
    coef: FloatArray          # raw-mode coefficients of the M controls, (K, M)
    nu: float
    rms: float
    n_reduced: int
    v: FloatArray | None = None


@dataclass
class ControlOutput:
    """One feedback evaluation: the control, its potential and solver diagnostics."""

    g: FloatArray
    alpha: HarmonicField
    X: FloatArray
    residual: float
    eps: float
    cache_hit: bool
    nu: float
    zero_method: str
    defect: float


class FeedbackLaw:
    """Maps a flow state and a desired acceleration to a boundary control on the arc.

    Concentrated controls are synthesized at a pose and reused (after an
    exact re-projection onto the admissible set) within ``cache_threshold``;
    farther away they are re-optimized starting from the nearest cached set.
    Evaluation is deterministic; only cache insertion mutates the object.
    """

    def __init__(self, model, settings: ControlSettings | None = None):
        self.model = model
        self.settings = settings or ControlSettings()
        self.cdata: ConcentrationData | None = None
        self.cache: list[CacheEntry] = []
        self.syntheses = 0

    def _concentration_data(self, mesh: PanelMesh) -> ConcentrationData:
        if self.cdata is None:
            counts = [sl.stop - sl.start for sl in mesh.body_slices]
            self.cdata = caratheodory(self.model.shapes, counts, self.settings.seed)
        return self.cdata

    @staticmethod
    def pose_distance(q1: FloatArray, q2: FloatArray) -> float:
        return float(np.max(np.abs(np.asarray(q1) - np.asarray(q2))))

    def nearest(self, q: FloatArray) -> tuple[CacheEntry | None, float]:
        best, dist = None, np.inf
        for entry in self.cache:
            d = self.pose_distance(entry.q, q)
            if d < dist:
                best, dist = entry, d
        return best, dist

    def synthesize(self, state: FlowState, basis: FloatArray, alpha_raw: FloatArray,
                   warm: CacheEntry | None = None) -> CacheEntry:
        cfg = self.settings
        cdata = self._concentration_data(state.mesh)
        iters = cfg.warm_iter if warm is not None else cfg.max_iter
        res = concentrate(state, basis, alpha_raw, cdata, cutoff=cfg.cutoff, max_evals=iters,
                          warm=None if warm is None else warm.coef, nu_stop=cfg.nu_target,
                          minimax_rounds=cfg.refine_iter)
        C = constraint_matrix(state, alpha_raw)
        entry = CacheEntry(state.q.copy(), reproject(res.coef, C), res.nu, res.rms, res.n_reduced,
                           None if warm is None else warm.v)
        self.cache.append(entry)
        self.syntheses += 1
        return entry

    def feedback(self, state: FlowState, target: FloatArray) -> ControlOutput:
        """Control whose generalized force yields acceleration ``target``.

        Solves ``Q[g] + L[g] = -(Mtot target + Ftilde)`` on the span of the
        cached controls, re-projected so that every output is admissible.
        """
        mesh = state.mesh
        cdata = self._concentration_data(mesh)
        basis = build_basis(mesh, self.settings.modes(self.model.n_bodies))
        alpha_raw = state.ops.solve_neumann(basis)
        entry, dist = self.nearest(state.q)
        hit = entry is not None and dist <= self.settings.cache_threshold
        if not hit:
            entry = self.synthesize(state, basis, alpha_raw, warm=entry)
        C = constraint_matrix(state, alpha_raw)
        P = reproject(entry.coef, C)
        fields = HarmonicField(mesh, alpha_raw @ P, basis @ P)
        G = state.gram(fields)
        L = state.L_matrix(fields)
        Xbar, v, how = nontrivial_zero(G, cdata, state.q, entry.v)
        entry.v = v
        rinv = right_inverse(G, Xbar, cdata, state.q)
        y = -state.assemble_F(target)
        sol = scaling_solve(G, L, Xbar, rinv.matrix, y, eps0=self.settings.eps0, tol=self.settings.tol)
        X = reduce_norm(G, L, sol.X, y) if self.settings.reduce_norm else sol.X
        residual = float(np.linalg.norm(quad(G, X) + L @ X - y))
        coef = P @ X
        g = basis @ coef
        alpha = HarmonicField(mesh, alpha_raw @ coef, g)
        return ControlOutput(g, alpha, X, residual, sol.eps, hit, entry.nu, how, rinv.defect)


def check_gains(KP: FloatArray, KD: FloatArray) -> None:
    for name, K in (("K_P", KP), ("K_D", KD)):
        K = np.asarray(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"{name} must be square")
        if not np.allclose(K, K.T, atol=1e-12 * max(1.0, np.abs(K).max())):
            raise ValueError(f"{name} is not symmetric")
        lo = float(np.linalg.eigvalsh(0.5 * (K + K.T)).min())
        if lo <= 0:
            raise ValueError(f"{name} is not positive definite (smallest eigenvalue {lo:.3g})")


def pd_target(q: FloatArray, qdot: FloatArray, ref: tuple[FloatArray, FloatArray, FloatArray],
              KP: FloatArray, KD: FloatArray) -> FloatArray:
    """Desired acceleration ``q'' + K_P (q_ref - q) + K_D (q'_ref - q')``."""
    q_ref, qd_ref, qdd_ref = ref
    return qdd_ref + KP @ (q_ref - q) + KD @ (qd_ref - qdot)


def pd_feedback(law: FeedbackLaw, state: FlowState, ref, KP: FloatArray, KD: FloatArray) -> ControlOutput:
    check_gains(KP, KD)
    return law.feedback(state, pd_target(state.q, state.qdot, ref, KP, KD))
