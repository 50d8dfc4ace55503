"""Fully discrete flow scheme with tangential-velocity control and its Newton solver.

Unknowns are stacked as ``[X (3K, vertex-major), V (K), beta1 (K), beta2 (K), H (K)]``.
Residual rows use the same layout: the vector momentum block is tested at the
``X`` slots, the normal-velocity block at the ``V`` slots, the two tangential
constraints at the ``beta`` slots and the curvature block at the ``H`` slots.

With ``tangential=False`` the beta unknowns and the tangential constraints are
dropped, leaving the plain 5K scheme ``[X, V, H]``.
"""

from __future__ import annotations

import logging
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .densities import WILLMORE, EnergyDensity
from .diagnostics import discrete_energy
from .discrete_ops import FaceFrames, face_frames, initial_curvature, scatter_corners, vertex_normals, weingarten
from .errors import (
    ConditioningError,
    MeshCollapseError,
    NewtonConvergenceError,
    SolverError,
)
from .mesh import SurfaceMesh, corner_orderings, enclosed_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepConfig:
    tau: float
    density: EnergyDensity = WILLMORE
    newton_tol: float = 1e-10
    max_newton_iters: int = 50
    alpha0: float = 1e6
    alpha_factor: float = 5.0
    beta_upper: float = 1e-4
    beta_lower: float = 1e-6
    tangential: bool = True
    normal_weighting: str = "area"
    frame_cycle: int = 3

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")
        if not self.alpha_factor > 1:
            raise ValueError("alpha_factor must exceed 1")
        if not self.beta_lower < self.beta_upper:
            raise ValueError("beta_lower must be below beta_upper")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be non-negative")
        if self.frame_cycle < 1:
            raise ValueError("frame_cycle must be at least 1")


@dataclass(frozen=True, eq=False)
class FlowState:
    """Surface, nodal curvature and penalty weight after ``step_index`` steps.

    ``orderings`` holds alternative corner orderings of the triangles; step
    ``m`` builds its tangent vectors from entry ``m % len(orderings)``.  The
    stored mesh always keeps its own ordering.
    """

    mesh: SurfaceMesh
    curvature: np.ndarray
    alpha: float
    time: float = 0.0
    step_index: int = 0
    orderings: tuple = ()

    def __post_init__(self):
        h = np.array(self.curvature, dtype=float)
        if h.shape != (self.mesh.n_vertices,):
            raise ValueError(f"curvature has shape {h.shape}, expected ({self.mesh.n_vertices},)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        h.setflags(write=False)
        object.__setattr__(self, "curvature", h)


def initial_state(mesh: SurfaceMesh, config: StepConfig, time: float = 0.0) -> FlowState:
    """State at t0 with curvature from the trace of the discrete Weingarten map.

    With tangential control and ``config.frame_cycle > 1`` the state also
    carries the corner orderings cycled through by :func:`step`.
    """
    frames = face_frames(mesh)
    A0 = weingarten(mesh, frames, vertex_normals(mesh, frames, config.normal_weighting))
    H0 = initial_curvature(mesh, frames, A0)
    orderings = ()
    if config.tangential and config.frame_cycle > 1:
        orderings = corner_orderings(mesh, config.frame_cycle)
    return FlowState(mesh, H0, config.alpha0 if config.tangential else 0.0, time, 0, orderings)


@dataclass(frozen=True, eq=False)
class NewtonIterate:
    positions: np.ndarray
    velocity: np.ndarray
    beta1: Optional[np.ndarray]
    beta2: Optional[np.ndarray]
    curvature: np.ndarray

    def stack(self) -> np.ndarray:
        parts = [self.positions.ravel(), self.velocity]
        if self.beta1 is not None:
            parts += [self.beta1, self.beta2]
        parts.append(self.curvature)
        return np.concatenate(parts)

    @classmethod
    def unstack(cls, u: np.ndarray, n_vertices: int, tangential: bool = True) -> "NewtonIterate":
        K = n_vertices
        expected = (7 if tangential else 5) * K
        if u.shape != (expected,):
            raise ValueError(f"unknown vector has shape {u.shape}, expected ({expected},)")
        X = u[: 3 * K].reshape(K, 3)
        if tangential:
            return cls(X, u[3 * K : 4 * K], u[4 * K : 5 * K], u[5 * K : 6 * K], u[6 * K :])
        return cls(X, u[3 * K : 4 * K], None, None, u[4 * K :])


@dataclass(frozen=True, eq=False)
class StepGeometry:
    """Everything the scheme needs from the old surface, computed once per step."""

    mesh: SurfaceMesh
    frames: FaceFrames
    weingarten: np.ndarray
    mass: np.ndarray
    normal_avg: np.ndarray
    tangent_avg: np.ndarray  # (2, K, 3)

    @classmethod
    def build(cls, mesh: SurfaceMesh, normal_weighting: str = "area", check: bool = True) -> "StepGeometry":
        frames = face_frames(mesh)
        w = vertex_normals(mesh, frames, normal_weighting)
        A = weingarten(mesh, frames, w)
        mass = frames.lumped_mass()
        third = (frames.area / 3.0)[:, None]

        def avg(v):
            return scatter_corners(mesh.triangles, np.repeat((third * v)[:, None, :], 3, axis=1), mesh.n_vertices)

        geom = cls(
            mesh, frames, A, mass, avg(frames.normal), np.stack([avg(frames.tangent1), avg(frames.tangent2)])
        )
        if check:
            geom.check_conditioning()
        return geom

    def check_conditioning(self, tol: float = 1e-12) -> None:
        """Raise ConditioningError if averaged tangent pairs are near parallel.

        The Gram determinant of the pair is compared with ``M_k**4``, the
        scale of two vectors of length ``M_k``, so the test is scale free.
        """
        t1, t2 = self.tangent_avg
        gram = np.einsum("kd,kd->k", t1, t1) * np.einsum("kd,kd->k", t2, t2) - np.einsum("kd,kd->k", t1, t2) ** 2
        ratio = gram / self.mass**4
        k = int(np.argmin(ratio))
        if not ratio[k] >= tol:
            raise ConditioningError(
                f"vertex {k}: averaged tangents nearly parallel (normalised Gram determinant {ratio[k]:.3g}); "
                "reorder triangle corners, e.g. with mesh.improve_corner_order"
            )


# -- sparsity pattern ---------------------------------------------------------


class _Pattern:
    """Fixed COO layout of the Newton matrix for one topology, with its CSC compression."""

    def __init__(self, triangles: np.ndarray, n_vertices: int, tangential: bool):
        t = triangles
        J = len(t)
        K = n_vertices
        self.K = K
        self.tangential = tangential
        self.voff = 3 * K
        self.hoff = (6 if tangential else 4) * K
        self.n = (7 if tangential else 5) * K
        d3 = np.arange(3)
        xr = 3 * t[:, :, None] + d3  # (J, corner, d)
        rows, cols = [], []
        # dc/dX: (J, k, l, d)
        rows.append(np.broadcast_to(xr[:, :, None, :], (J, 3, 3, 3)).ravel())
        cols.append(np.broadcast_to(xr[:, None, :, :], (J, 3, 3, 3)).ravel())
        # dc/dH: (J, k, d, l)
        rows.append(np.broadcast_to(xr[:, :, :, None], (J, 3, 3, 3)).ravel())
        cols.append(np.broadcast_to(self.hoff + t[:, None, None, :], (J, 3, 3, 3)).ravel())
        # dd/dX: (J, k, l, e)
        rows.append(np.broadcast_to(self.hoff + t[:, :, None, None], (J, 3, 3, 3)).ravel())
        cols.append(np.broadcast_to(xr[:, None, :, :], (J, 3, 3, 3)).ravel())
        self.n_face = 81 * J
        k = np.arange(K)
        kx = (3 * k[:, None] + d3).ravel()
        kv = np.repeat(self.voff + k, 3)
        # da/dX, da/dV
        rows += [kv, self.voff + k]
        cols += [kx, self.voff + k]
        # dc/dV
        rows.append(kx)
        cols.append(kv)
        if tangential:
            for i in range(2):
                kb = np.repeat((4 + i) * K + k, 3)
                rows += [kb, kx]  # db_i/dX, dc/dbeta_i
                cols += [kx, kb]
        # dd/dH
        rows.append(self.hoff + k)
        cols.append(self.hoff + k)
        self.full = _Compressor(np.concatenate(rows), np.concatenate(cols), self.n)
        self._schur = None
        self._triangles = t

    def matrix(self, values: np.ndarray) -> sp.csc_matrix:
        return self.full.matrix(values)

    @property
    def schur(self) -> "_Compressor":
        """Layout of the condensed 2K matrix in (V, H)."""
        if self._schur is None:
            t, K, J = self._triangles, self.K, len(self._triangles)
            tk = np.broadcast_to(t[:, :, None], (J, 3, 3)).ravel()
            tl = np.broadcast_to(t[:, None, :], (J, 3, 3)).ravel()
            k = np.arange(K)
            rows = np.concatenate([tk, tk, K + tk, k, K + k])
            cols = np.concatenate([tl, K + tl, tl, k, K + k])
            self._schur = _Compressor(rows, cols, 2 * K)
        return self._schur


class _Compressor:
    """Maps a fixed list of COO positions (duplicates allowed) to CSC storage."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, n: int):
        self.n = n
        key = cols.astype(np.int64) * n + rows
        uniq, self.inverse = np.unique(key, return_inverse=True)
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)

    def matrix(self, values: np.ndarray) -> sp.csc_matrix:
        data = np.bincount(self.inverse, weights=values, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


_PATTERNS: dict = {}


def _pattern(mesh: SurfaceMesh, tangential: bool) -> _Pattern:
    key = (id(mesh.triangles), mesh.n_vertices, tangential)
    hit = _PATTERNS.get(key)
    if hit is not None and hit[0]() is mesh.triangles:
        return hit[1]
    pat = _Pattern(mesh.triangles, mesh.n_vertices, tangential)
    if len(_PATTERNS) > 8:
        _PATTERNS.clear()
    _PATTERNS[key] = (weakref.ref(mesh.triangles), pat)
    return pat


# -- residual and Jacobian ----------------------------------------------------


@dataclass
class _FaceTerms:
    g: np.ndarray  # (J, 3, 3) hat gradients
    gg: np.ndarray  # (J, 3, 3) g_k . g_l
    Ag: np.ndarray  # (J, 3, 3) A g_k
    Gg: np.ndarray  # (J, 3, 3) (grad X) g_k
    fH: np.ndarray
    dfH: np.ndarray


def _face_terms(geom: StepGeometry, X: np.ndarray, H: np.ndarray, density: EnergyDensity) -> _FaceTerms:
    t = geom.mesh.triangles
    g = geom.frames.grad_hat
    G = np.einsum("jla,jlb->jab", X[t], g)
    return _FaceTerms(
        g=g,
        gg=np.einsum("jkd,jld->jkl", g, g),
        Ag=np.einsum("jab,jkb->jka", geom.weingarten, g),
        Gg=np.einsum("jab,jkb->jka", G, g),
        fH=np.asarray(density.f(H), dtype=float) * np.ones(len(H)),
        dfH=np.asarray(density.df(H), dtype=float) * np.ones(len(H)),
    )


def residual(
    state: FlowState, geom: StepGeometry, iterate: NewtonIterate, config: StepConfig
) -> np.ndarray:
    """Stacked nodal residual LHS - RHS of the implicit scheme at ``iterate``."""
    mesh = geom.mesh
    K = mesh.n_vertices
    X, V, H = iterate.positions, iterate.velocity, iterate.curvature
    if X.shape != (K, 3) or V.shape != (K,) or H.shape != (K,):
        raise ValueError("iterate shapes do not match the mesh")
    tangential = config.tangential
    if tangential and (iterate.beta1 is None or iterate.beta1.shape != (K,) or iterate.beta2.shape != (K,)):
        raise ValueError("tangential scheme needs beta1 and beta2 of length K")
    t = mesh.triangles
    fr = geom.frames
    area = fr.area
    n = fr.normal
    dX = X - mesh.vertices
    ft = _face_terms(geom, X, H, config.density)

    ra = np.einsum("kd,kd->k", dX, geom.normal_avg) / config.tau - geom.mass * V

    fbar = ft.fH[t].mean(axis=1)
    dfbar = ft.dfH[t].mean(axis=1)
    grad_df = np.einsum("jl,jld->jd", ft.dfH[t], ft.g)
    grad_df_g = np.einsum("jd,jkd->jk", grad_df, ft.g)
    face_c = area[:, None, None] * (
        dfbar[:, None, None] * ft.Ag - n[:, None, :] * grad_df_g[:, :, None] - fbar[:, None, None] * ft.Gg
    )
    rc = V[:, None] * geom.normal_avg - scatter_corners(t, face_c, K)
    if tangential:
        rc += state.alpha * (iterate.beta1[:, None] * geom.tangent_avg[0] + iterate.beta2[:, None] * geom.tangent_avg[1])

    D = np.einsum("jla,jlb->jab", dX[t], ft.g)
    nDg = np.einsum("ja,jab,jkb->jk", n, D, ft.g)
    DA = np.einsum("jab,jab->j", D, geom.weingarten)
    face_d = area[:, None] * (nDg - DA[:, None] / 3.0)
    rd = geom.mass * (H - state.curvature) - scatter_corners(t, face_d, K)

    parts = [rc.ravel(), ra]
    if tangential:
        parts += [np.einsum("kd,kd->k", dX, geom.tangent_avg[0]), np.einsum("kd,kd->k", dX, geom.tangent_avg[1])]
    parts.append(rd)
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class SparseSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m or self.rhs.shape != (n,):
            raise ValueError("sparse system must be square with a matching right-hand side")


@dataclass
class _FaceJacobian:
    cx: np.ndarray  # (J, k, l) scalar coefficient of dc_k/dX_l (times identity)
    ch: np.ndarray  # (J, k, d, l) dc_{k,d}/dH_l
    dx: np.ndarray  # (J, k, l, e) dd_k/dX_{l,e}


def _face_jacobian(geom: StepGeometry, iterate: NewtonIterate, density: EnergyDensity) -> _FaceJacobian:
    t = geom.mesh.triangles
    area = geom.frames.area
    n = geom.frames.normal
    H = iterate.curvature
    ft = _face_terms(geom, iterate.positions, H, density)
    d2 = (np.asarray(density.d2f(H), dtype=float) * np.ones(len(H)))[t]
    df = ft.dfH[t]
    fbar = ft.fH[t].mean(axis=1)
    cx = (area * fbar)[:, None, None] * ft.gg
    ch = -area[:, None, None, None] * (
        (d2[:, None, None, :] / 3.0) * ft.Ag[:, :, :, None]
        - n[:, None, :, None] * d2[:, None, None, :] * ft.gg[:, :, None, :]
        - (df[:, None, None, :] / 3.0) * ft.Gg[:, :, :, None]
    )
    dx = -area[:, None, None, None] * (n[:, None, None, :] * ft.gg[:, :, :, None] - ft.Ag[:, None, :, :] / 3.0)
    return _FaceJacobian(cx, ch, dx)


def _assemble(state, geom, config, fj: _FaceJacobian) -> sp.csc_matrix:
    pat = _pattern(geom.mesh, config.tangential)
    J = len(fj.cx)
    vals = [np.broadcast_to(fj.cx[:, :, :, None], (J, 3, 3, 3)).ravel(), fj.ch.ravel(), fj.dx.ravel()]
    vals += [(geom.normal_avg / config.tau).ravel(), -geom.mass, geom.normal_avg.ravel()]
    if config.tangential:
        for i in range(2):
            vals += [geom.tangent_avg[i].ravel(), state.alpha * geom.tangent_avg[i].ravel()]
    vals.append(geom.mass)
    return pat.matrix(np.concatenate(vals))


def jacobian(state: FlowState, geom: StepGeometry, iterate: NewtonIterate, config: StepConfig) -> sp.csc_matrix:
    """Exact derivative of :func:`residual` with respect to the stacked unknowns."""
    return _assemble(state, geom, config, _face_jacobian(geom, iterate, config.density))


def assemble_newton_system(
    state: FlowState, geom: StepGeometry, iterate: NewtonIterate, config: StepConfig
) -> SparseSystem:
    """Newton matrix and right-hand side ``-residual``."""
    return SparseSystem(jacobian(state, geom, iterate, config), -residual(state, geom, iterate, config))


# -- linear solve -------------------------------------------------------------


def backward_error(matrix, x, rhs) -> float:
    """Normwise backward error ``|b - Ax| / (|A| |x| + |b|)`` in the max norm."""
    r = rhs - matrix @ x
    anorm = abs(matrix).sum(axis=1).max() if sp.issparse(matrix) else np.abs(matrix).sum(axis=1).max()
    denom = float(anorm) * np.abs(x).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    return 0.0 if denom == 0 else float(np.abs(r).max() / denom)


def solve_sparse(system: SparseSystem, tol: float = 1e-12, max_refine: int = 4) -> np.ndarray:
    """Sparse LU solve with iterative refinement.

    Raises SolverError for structurally empty rows or columns, numerically
    singular pivots, or if refinement cannot reach backward error ``tol``.
    """
    A = sp.csc_matrix(system.matrix, copy=True)
    b = np.asarray(system.rhs, dtype=float)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    # explicitly stored zeros do not count as structure
    A.eliminate_zeros()
    row_nnz = np.diff(sp.csr_matrix(A).indptr)
    col_nnz = np.diff(A.indptr)
    if np.any(row_nnz == 0) or np.any(col_nnz == 0):
        which = "row" if np.any(row_nnz == 0) else "column"
        idx = int(np.flatnonzero((row_nnz if which == "row" else col_nnz) == 0)[0])
        raise SolverError(f"structurally singular matrix: empty {which} {idx}")
    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from exc
    udiag = np.abs(lu.U.diagonal())
    pivot_ratio = udiag.min() / udiag.max() if udiag.max() > 0 else 0.0
    if not pivot_ratio > 1e-15:
        raise SolverError(f"numerically singular matrix: pivot ratio {pivot_ratio:.3g}")
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite solution (pivot ratio {pivot_ratio:.3g})")
    err = backward_error(A, x, b)
    for _ in range(max_refine):
        if err <= tol:
            break
        x = x + lu.solve(b - A @ x)
        err = backward_error(A, x, b)
    if not err <= tol:
        raise SolverError(f"linear solve stalled at backward error {err:.3g} (pivot ratio {pivot_ratio:.3g})")
    return x


class CondensedSolver:
    """Exact solve of the tangential Newton system by static condensation.

    The normal-velocity and tangential rows couple only the unknowns of one
    vertex, so ``dX_k`` is eliminated locally in terms of ``dV_k``.  Projecting
    the vector rows onto ``t1_k x t2_k`` removes the beta unknowns.  What is
    left is a 2K system in ``(dV, dH)``; beta follows from a 3x3 solve per
    vertex.  The result is refined against the full matrix.
    """

    def __init__(self, matrix: sp.spmatrix, geom: StepGeometry, alpha: float, tau: float, face_jac: _FaceJacobian):
        K = geom.mesh.n_vertices
        if matrix.shape != (7 * K, 7 * K):
            raise ValueError("condensed solve needs the full tangential system")
        if not alpha > 0:
            raise SolverError("condensed solve needs alpha > 0")
        self.K, self.tau = K, tau
        self.matrix = sp.csc_matrix(matrix)
        nbar = geom.normal_avg
        t1, t2 = geom.tangent_avg
        mass = geom.mass
        Q = np.stack([nbar, t1, t2], axis=1)
        Z = np.stack([nbar, alpha * t1, alpha * t2], axis=2)
        try:
            self.Qinv = np.linalg.inv(Q)
            self.Zinv = np.linalg.inv(Z)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"singular vertex frame: {exc}") from exc
        # dX_k = a_k dV_k + b_k(rhs)
        self.a = tau * mass[:, None] * self.Qinv[:, :, 0]
        self.nu = np.cross(t1, t2) / (mass**2)[:, None]
        t = geom.mesh.triangles
        nu_t, a_t = self.nu[t], self.a[t]
        s11 = face_jac.cx * np.einsum("jkd,jld->jkl", nu_t, a_t)
        s12 = np.einsum("jkd,jkdl->jkl", nu_t, face_jac.ch)
        s21 = np.einsum("jkle,jle->jkl", face_jac.dx, a_t)
        vals = np.concatenate([s11.ravel(), s12.ravel(), s21.ravel(), np.einsum("kd,kd->k", self.nu, nbar), mass])
        S = _pattern(geom.mesh, True).schur.matrix(vals)
        try:
            self.lu = spla.splu(S, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"condensed factorisation failed: {exc}") from exc
        udiag = np.abs(self.lu.U.diagonal())
        self.pivot_ratio = udiag.min() / udiag.max() if udiag.max() > 0 else 0.0
        if not self.pivot_ratio > 1e-15:
            raise SolverError(f"numerically singular condensed matrix: pivot ratio {self.pivot_ratio:.3g}")

    def _xh_product(self, dX: np.ndarray, dH: np.ndarray):
        """Vector rows and curvature rows of the full matrix applied to (dX, 0, 0, 0, dH)."""
        K = self.K
        z = np.zeros(7 * K)
        z[: 3 * K] = dX.ravel()
        z[6 * K :] = dH
        out = self.matrix @ z
        return out[: 3 * K].reshape(K, 3), out[6 * K :]

    def _apply(self, y: np.ndarray) -> np.ndarray:
        K = self.K
        yc = y[: 3 * K].reshape(K, 3)
        ya, yb1, yb2, yh = y[3 * K : 4 * K], y[4 * K : 5 * K], y[5 * K : 6 * K], y[6 * K :]
        b = np.einsum("kij,kj->ki", self.Qinv, np.stack([self.tau * ya, yb1, yb2], axis=1))
        cb, fb = self._xh_product(b, np.zeros(K))
        # the curvature rows also carry M dH, which is zero here
        rhs = np.concatenate([np.einsum("kd,kd->k", self.nu, yc - cb), yh - fb])
        sol = self.lu.solve(rhs)
        dV, dH = sol[:K], sol[K:]
        dX = self.a * dV[:, None] + b
        cx, _ = self._xh_product(dX, dH)
        local = np.einsum("kij,kj->ki", self.Zinv, yc - cx)
        return np.concatenate([dX.ravel(), dV, local[:, 1], local[:, 2], dH])

    def solve(self, rhs: np.ndarray, tol: float = 1e-12, max_refine: int = 6) -> np.ndarray:
        x = self._apply(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite solution (pivot ratio {self.pivot_ratio:.3g})")
        err = backward_error(self.matrix, x, rhs)
        for _ in range(max_refine):
            if err <= tol:
                break
            x = x + self._apply(rhs - self.matrix @ x)
            err = backward_error(self.matrix, x, rhs)
        if not err <= tol:
            raise SolverError(f"condensed solve stalled at backward error {err:.3g}")
        return x


# -- Newton -------------------------------------------------------------------


@dataclass
class NewtonResult:
    iterate: NewtonIterate
    iterations: int
    update_norms: list


def _scaling(state: FlowState, config: StepConfig, K: int) -> np.ndarray:
    """Column scaling that brings the alpha-weighted beta columns to order one."""
    s = np.ones((7 if config.tangential else 5) * K)
    if config.tangential and state.alpha > 0:
        s[4 * K : 6 * K] = 1.0 / state.alpha
    return s


def step_geometry(state: FlowState, config: StepConfig) -> StepGeometry:
    """Old-surface data for the next step, using this step's corner ordering."""
    mesh = state.mesh
    if config.tangential and len(state.orderings) > 1:
        mesh = SurfaceMesh(mesh.vertices, state.orderings[state.step_index % len(state.orderings)])
    return StepGeometry.build(mesh, config.normal_weighting, check=config.tangential)


def newton_solve(state: FlowState, config: StepConfig, geom: Optional[StepGeometry] = None) -> NewtonResult:
    """Solve one implicit step by Newton's method from ``(X^m, 0, 0, 0, H^m)``."""
    mesh = state.mesh
    K = mesh.n_vertices
    if config.tangential and state.alpha <= 0:
        raise SolverError("alpha must be positive when the tangential unknowns are present; use tangential=False")
    if geom is None:
        geom = step_geometry(state, config)
    zeros = np.zeros(K)
    it = NewtonIterate(
        mesh.vertices.copy(),
        zeros.copy(),
        zeros.copy() if config.tangential else None,
        zeros.copy() if config.tangential else None,
        state.curvature.copy(),
    )
    u = it.stack()
    scale = _scaling(state, config, K)
    norms = []
    for l in range(1, config.max_newton_iters + 1):
        r = residual(state, geom, it, config)
        fj = _face_jacobian(geom, it, config.density)
        Jm = _assemble(state, geom, config, fj)
        try:
            if config.tangential:
                delta = CondensedSolver(Jm, geom, state.alpha, config.tau, fj).solve(-r)
            else:
                delta = scale * solve_sparse(SparseSystem(Jm @ sp.diags(scale), -r))
        except SolverError as exc:
            raise type(exc)(f"Newton iteration {l}: {exc}") from exc
        u = u + delta
        norm = float(np.abs(delta).max())
        norms.append(norm)
        if not (np.all(np.isfinite(u)) and math.isfinite(norm)):
            raise NewtonConvergenceError(
                f"Newton iterates became non-finite at iteration {l}; try a smaller time step", l, norms
            )
        it = NewtonIterate.unstack(u, K, config.tangential)
        if norm <= config.newton_tol:
            return NewtonResult(it, l, norms)
    raise NewtonConvergenceError(
        f"Newton did not converge in {config.max_newton_iters} iterations "
        f"(last update {norms[-1]:.3g}); reduce the time step tau={config.tau:g}",
        config.max_newton_iters,
        norms,
    )


def adapt_alpha(alpha: float, beta1, beta2, config: StepConfig) -> float:
    """Scale alpha up when the tangential indicator is large and down when it is tiny."""
    beta = max(float(np.abs(beta1).max(initial=0.0)), float(np.abs(beta2).max(initial=0.0)))
    if beta >= config.beta_upper:
        return alpha * config.alpha_factor
    if beta <= config.beta_lower:
        return alpha / config.alpha_factor
    return alpha


# -- time stepping ------------------------------------------------------------


@dataclass(frozen=True)
class StepStats:
    step: int
    time: float
    newton_iters: int
    update_norms: tuple
    v_l2: float
    beta_max: float
    alpha: float
    energy: float
    area: float
    volume: float


def _check_new_mesh(old: SurfaceMesh, X: np.ndarray, step_index: int, state: FlowState) -> SurfaceMesh:
    new = old.with_vertices(X)
    p = X[new.triangles]
    direction = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    q = old.vertices[old.triangles]
    old_dir = np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0])
    jn = np.linalg.norm(direction, axis=1)
    scale = max(float(np.abs(X).max()), 1.0)
    bad = np.flatnonzero(~(jn > 1e-14 * scale**2) | (np.einsum("jd,jd->j", direction, old_dir) <= 0))
    if bad.size:
        raise MeshCollapseError(
            f"step {step_index}: triangle {bad[0]} collapsed or inverted", step_index=step_index, last_state=state
        )
    return new


def step(state: FlowState, config: StepConfig, geom: Optional[StepGeometry] = None):
    """Advance one time step; returns ``(new_state, StepStats)``."""
    if geom is None:
        geom = step_geometry(state, config)
    res = newton_solve(state, config, geom)
    it = res.iterate
    index = state.step_index + 1
    new_mesh = _check_new_mesh(state.mesh, it.positions, index, state)
    new_frames = face_frames(new_mesh)
    if config.tangential:
        alpha = adapt_alpha(state.alpha, it.beta1, it.beta2, config)
        beta_max = max(float(np.abs(it.beta1).max()), float(np.abs(it.beta2).max()))
    else:
        alpha, beta_max = state.alpha, 0.0
    new_state = FlowState(new_mesh, it.curvature, alpha, state.time + config.tau, index, state.orderings)
    stats = StepStats(
        step=index,
        time=new_state.time,
        newton_iters=res.iterations,
        update_norms=tuple(res.update_norms),
        v_l2=math.sqrt(float(np.dot(geom.mass, it.velocity**2))),
        beta_max=beta_max,
        alpha=state.alpha,
        energy=discrete_energy(new_frames, it.curvature, config.density),
        area=float(new_frames.area.sum()),
        volume=enclosed_volume(new_mesh, check=False),
    )
    return new_state, stats


@dataclass
class RunResult:
    final: FlowState
    stats: list = field(default_factory=list)
    initial_energy: float = 0.0

    @property
    def energies(self) -> np.ndarray:
        return np.array([self.initial_energy] + [s.energy for s in self.stats])


Hook = Callable[[FlowState, Optional[StepStats]], None]


def n_steps(t0: float, t_end: float, tau: float) -> int:
    return max(0, math.ceil((t_end - t0) / tau - 1e-9))


def run(initial: FlowState, config: StepConfig, t_end: float, hooks: Sequence[Hook] = ()) -> RunResult:
    """Step from ``initial.time`` to ``t_end`` with fixed tau.

    Each hook is called as ``hook(state, stats)`` once for the initial state
    (``stats=None``) and after every step.  On mesh collapse, hooks exposing
    ``on_abort(state)`` receive the last good state before the error propagates.
    """
    if t_end < initial.time:
        raise ValueError("t_end precedes the initial time")
    frames = face_frames(initial.mesh)
    result = RunResult(initial, [], discrete_energy(frames, initial.curvature, config.density))
    for h in hooks:
        h(initial, None)
    state = initial
    for _ in range(n_steps(initial.time, t_end, config.tau)):
        try:
            state, stats = step(state, config)
        except MeshCollapseError:
            for h in hooks:
                abort = getattr(h, "on_abort", None)
                if abort is not None:
                    abort(state)
            raise
        result.stats.append(stats)
        result.final = state
        log.debug("step %d t=%.6g W=%.12g newton=%d", stats.step, stats.time, stats.energy, stats.newton_iters)
        for h in hooks:
            h(state, stats)
    return result
