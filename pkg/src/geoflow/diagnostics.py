"""Energies, manifold distance, mesh quality and the mesh-refinement study."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .densities import EnergyDensity
from .discrete_ops import FaceFrames
from .errors import MeshError, ProtocolError
from .mesh import SurfaceMesh, enclosed_volume, mesh_size, validate

ENERGY_HEADER = ("step", "time", "energy", "area", "volume", "v_l2", "beta_max", "alpha", "newton_iters")
CONVERGENCE_HEADER = ("h", "tau", "t", "error", "order")
TAU_FACTOR = 1.0 / 180.0


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.12g" % x


# -- energy -------------------------------------------------------------------


def discrete_energy(frames: FaceFrames, H, density: EnergyDensity) -> float:
    """Lumped energy ``(1/3) sum_j |sigma_j| sum_k f(H(q_jk))``."""
    H = np.asarray(H, dtype=float)
    if H.shape != (frames.n_vertices,):
        raise ValueError(f"curvature has shape {H.shape}, expected ({frames.n_vertices},)")
    fH = np.asarray(density.f(H), dtype=float) * np.ones(len(H))
    return float(np.sum(frames.area * fH[frames.triangles].mean(axis=1)))


@dataclass(frozen=True)
class EnergyRecord:
    step: int
    time: float
    energy: float
    area: float
    volume: float
    v_l2: float
    beta_max: float
    alpha: float
    newton_iters: int

    def row(self):
        return [_fmt(getattr(self, k)) for k in ENERGY_HEADER]


def write_energy_csv(records: Iterable[EnergyRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ENERGY_HEADER)
        for r in records:
            w.writerow(r.row())


def read_energy_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EnergyRecord(**{k: (int(r[k]) if k in ("step", "newton_iters") else float(r[k])) for k in ENERGY_HEADER})
        for r in rows
    ]


# -- manifold distance --------------------------------------------------------


@dataclass(frozen=True)
class DistanceEstimate:
    """Manifold distance with its pieces.

    ``value`` is ``|A| + |B| - 2|A n B|`` clamped at zero; ``raw`` keeps the
    sign.  ``error_bound`` is one cell volume per cell crossed by either
    surface; it is a loose over-estimate for the z-exact variant.
    """

    value: float
    error_bound: float
    volume_a: float
    volume_b: float
    intersection: float
    raw: float
    resolution: int

    def __float__(self):
        return self.value


@dataclass
class _Grid:
    lo: np.ndarray
    step: np.ndarray
    n: int

    def centres(self, axis: int) -> np.ndarray:
        return self.lo[axis] + (np.arange(self.n) + 0.5) * self.step[axis]


def _crossings(mesh: SurfaceMesh, grid: _Grid):
    """Intersections of the z-parallel lines through xy cell centres with the surface.

    Returns ``(column, z)`` arrays.  Points on a shared projected edge are
    assigned to exactly one of the two triangles by a fixed half-open rule,
    using edge functions evaluated in a canonical endpoint order so that the
    two triangles see exactly negated values.
    """
    V = mesh.vertices
    T = mesh.triangles
    P = V[T]
    xy = P[:, :, :2]
    signed = (xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1]) - (xy[:, 1, 1] - xy[:, 0, 1]) * (
        xy[:, 2, 0] - xy[:, 0, 0]
    )
    keep = signed != 0
    T = T[keep]
    P = P[keep]
    # orient every projected triangle counter-clockwise
    flip = signed[keep] < 0
    T = np.where(flip[:, None], T[:, [0, 2, 1]], T)
    P = np.where(flip[:, None, None], P[:, [0, 2, 1]], P)

    lo, step, n = grid.lo, grid.step, grid.n
    pmin = P[:, :, :2].min(axis=1)
    pmax = P[:, :, :2].max(axis=1)
    i0 = np.clip(np.ceil((pmin - lo[:2]) / step[:2] - 0.5).astype(np.int64), 0, n)
    i1 = np.clip(np.floor((pmax - lo[:2]) / step[:2] - 0.5).astype(np.int64), -1, n - 1)
    nx = np.maximum(i1[:, 0] - i0[:, 0] + 1, 0)
    ny = np.maximum(i1[:, 1] - i0[:, 1] + 1, 0)
    count = nx * ny
    tri = np.repeat(np.arange(len(T)), count)
    if tri.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    offs = np.arange(tri.size) - np.repeat(np.cumsum(count) - count, count)
    ix = i0[tri, 0] + offs // ny[tri]
    iy = i0[tri, 1] + offs % ny[tri]
    px = lo[0] + (ix + 0.5) * step[0]
    py = lo[1] + (iy + 0.5) * step[1]

    inside = np.ones(tri.size, dtype=bool)
    lam = np.empty((tri.size, 3))
    for e in range(3):
        a = T[tri, e]
        b = T[tri, (e + 1) % 3]
        swap = a > b
        u = np.where(swap, b, a)
        v = np.where(swap, a, b)
        ux, uy = V[u, 0], V[u, 1]
        dx, dy = V[v, 0] - ux, V[v, 1] - uy
        f = dx * (py - uy) - dy * (px - ux)
        sgn = np.where(swap, -1.0, 1.0)
        f = sgn * f
        # direction a->b in projection
        ex, ey = sgn * dx, sgn * dy
        top_left = (ey > 0) | ((ey == 0) & (ex < 0))
        inside &= (f > 0) | ((f == 0) & top_left)
        lam[:, (e + 2) % 3] = f
    tri, ix, iy, lam = tri[inside], ix[inside], iy[inside], lam[inside]
    w = lam / lam.sum(axis=1, keepdims=True)
    z = np.einsum("nl,nl->n", w, P[tri, :, 2])
    return ix * n + iy, z


def _column_overlap(ca, za, cb, zb, grid: _Grid, exact: bool):
    """Total intersection measure over all columns: cell count, or summed length if ``exact``."""
    col = np.concatenate([ca, cb])
    z = np.concatenate([za, zb])
    which = np.concatenate([np.zeros(len(ca), dtype=np.int8), np.ones(len(cb), dtype=np.int8)])
    order = np.lexsort((z, col))
    col, z, which = col[order], z[order], which[order]
    # parity of each surface after every event, per column
    first = np.ones(len(col), dtype=bool)
    first[1:] = col[1:] != col[:-1]
    cum_a = np.cumsum(which == 0)
    cum_b = np.cumsum(which == 1)
    start = np.flatnonzero(first)
    base_a = np.repeat(cum_a[start] - (which[start] == 0), np.diff(np.append(start, len(col))))
    base_b = np.repeat(cum_b[start] - (which[start] == 1), np.diff(np.append(start, len(col))))
    in_a = (cum_a - base_a) % 2 == 1
    in_b = (cum_b - base_b) % 2 == 1
    # segment from event i to i+1 within the same column
    same = np.zeros(len(col), dtype=bool)
    same[:-1] = col[:-1] == col[1:]
    seg = np.flatnonzero(same & in_a & in_b)
    z0, z1 = z[seg], z[seg + 1]
    if exact:
        return float(np.sum(z1 - z0)) / grid.step[2]
    # centres lo + (k + 1/2) h with z0 <= centre < z1
    k0 = np.ceil((z0 - grid.lo[2]) / grid.step[2] - 0.5)
    k1 = np.ceil((z1 - grid.lo[2]) / grid.step[2] - 0.5)
    return float(np.sum(np.maximum(k1 - k0, 0)))


def _boundary_cells(cols, zs, grid: _Grid) -> int:
    k = np.clip(np.floor((zs - grid.lo[2]) / grid.step[2]).astype(np.int64), 0, grid.n - 1)
    return len(np.unique(cols * grid.n + k))


def manifold_distance(a: SurfaceMesh, b: SurfaceMesh, resolution: int = 128, z_exact: bool = False) -> DistanceEstimate:
    """Symmetric-difference volume between the regions enclosed by two closed meshes.

    Enclosed volumes are exact.  The intersection volume is measured on a
    ``resolution**3`` grid over the joint bounding box: cell centres are
    classified by the parity of surface crossings along z-parallel lines.
    With ``z_exact`` the overlap along each line is integrated exactly
    instead of counted cell by cell.
    """
    if resolution < 32:
        raise ValueError("resolution must be at least 32")
    for name, m in (("a", a), ("b", b)):
        rep = validate(m)
        if not (rep.is_closed and rep.is_oriented):
            raise MeshError(f"mesh {name} must be closed and consistently oriented")
    va = enclosed_volume(a)
    vb = enclosed_volume(b)
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    span = hi - lo
    pad = 1e-9 * max(float(span.max()), 1e-300)
    lo = lo - pad
    span = span + 2 * pad
    grid = _Grid(lo, span / resolution, resolution)
    ca, za = _crossings(a, grid)
    cb, zb = _crossings(b, grid)
    cell = float(np.prod(grid.step))
    inter = cell * _column_overlap(ca, za, cb, zb, grid, z_exact)
    raw = va + vb - 2.0 * inter
    bound = cell * (_boundary_cells(ca, za, grid) + _boundary_cells(cb, zb, grid))
    return DistanceEstimate(max(raw, 0.0), bound, va, vb, inter, raw, resolution)


# -- mesh quality -------------------------------------------------------------


@dataclass(frozen=True)
class MeshQuality:
    area_ratio: float
    min_angle: float  # degrees
    max_angle: float
    mean_aspect: float
    max_aspect: float
    degenerate: bool  # min angle below one degree

    def __str__(self):
        return (
            f"area_ratio={self.area_ratio:.4g} min_angle={self.min_angle:.4g} max_angle={self.max_angle:.4g} "
            f"aspect_mean={self.mean_aspect:.4g} aspect_max={self.max_aspect:.4g}"
            + (" DEGENERATE" if self.degenerate else "")
        )


def mesh_quality(mesh: SurfaceMesh) -> MeshQuality:
    """Area ratio, interior angles and aspect ratio (longest edge over twice the inradius, 1 for equilateral)."""
    p = mesh.vertices[mesh.triangles]
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    L = np.linalg.norm(e, axis=2)
    area = 0.5 * np.linalg.norm(np.cross(e[:, 0], e[:, 1]), axis=1)
    # angle at corner l sits between the two edges meeting there
    cosang = np.empty_like(L)
    for l in range(3):
        u = -e[:, (l + 1) % 3]
        v = e[:, (l + 2) % 3]
        cosang[:, l] = np.einsum("jd,jd->j", u, v) / (L[:, (l + 1) % 3] * L[:, (l + 2) % 3])
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        inradius = 2.0 * area / L.sum(axis=1)
        aspect = L.max(axis=1) / (2.0 * math.sqrt(3.0) * inradius)
    amin = float(area.min())
    return MeshQuality(
        area_ratio=float(area.max() / amin) if amin > 0 else math.inf,
        min_angle=float(ang.min()),
        max_angle=float(ang.max()),
        mean_aspect=float(np.mean(aspect)),
        max_aspect=float(np.max(aspect)),
        degenerate=bool(ang.min() < 1.0),
    )


# -- convergence study --------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    h: float
    tau: float
    t: float
    error: float
    error_bound: float
    order: Optional[float]


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)

    def times(self):
        return sorted({r.t for r in self.rows})

    def at(self, t):
        return sorted((r for r in self.rows if r.t == t), key=lambda r: -r.h)

    def fitted_order(self, t) -> float:
        """Least-squares slope of log e against log h over all levels at time ``t``."""
        rs = self.at(t)
        if len(rs) < 2:
            raise ProtocolError("need at least two levels to fit an order")
        x = np.log([r.h for r in rs])
        y = np.log([r.error for r in rs])
        return float(np.polyfit(x, y, 1)[0])

    def pairwise_orders(self, t):
        return [r.order for r in self.at(t)[1:]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CONVERGENCE_HEADER)
            for t in self.times():
                for r in self.at(t):
                    w.writerow([_fmt(r.h), _fmt(r.tau), _fmt(r.t), _fmt(r.error), "" if r.order is None else _fmt(r.order)])


def pair_order(e1: float, e2: float, h1: float, h2: float) -> float:
    return math.log(e1 / e2) / math.log(h1 / h2)


def protocol_tau(h: float, spacing: float) -> float:
    """Largest step not above ``h**2/180`` that divides the checkpoint spacing exactly."""
    nominal = TAU_FACTOR * h * h
    return spacing / math.ceil(spacing / nominal * (1 - 1e-12))


def convergence_study(
    make_mesh: Callable[[int], SurfaceMesh],
    density: EnergyDensity,
    levels: Sequence[int],
    checkpoints: Sequence[float],
    reference_level: int,
    resolution: int = 128,
    z_exact: bool = True,
    tau_override: Optional[float] = None,
    allow_free_tau: bool = False,
    progress: Optional[Callable[[str], None]] = None,
    **step_options,
) -> ConvergenceTable:
    """Errors of coarse runs against a finer reference run at shared checkpoint times.

    Every level uses ``tau = h**2/180`` adjusted down to divide the first
    checkpoint, and checkpoints must be multiples of the first one, so each
    run lands on them exactly.
    """
    from .solver import StepConfig, initial_state, step

    levels = list(levels)
    if len(levels) < 2:
        raise ProtocolError("a convergence study needs at least two coarse levels")
    if reference_level <= max(levels):
        raise ProtocolError("the reference level must be finer than every coarse level")
    cps = sorted(float(t) for t in checkpoints)
    if not cps or cps[0] <= 0:
        raise ProtocolError("checkpoints must be positive")
    spacing = cps[0]
    for t in cps:
        ratio = t / spacing
        if abs(ratio - round(ratio)) > 1e-9:
            raise ProtocolError(f"checkpoint {t} is not a multiple of the first checkpoint {spacing}")
    if tau_override is not None and not allow_free_tau:
        raise ProtocolError("a tau override breaks the tau = h^2/180 protocol; pass allow_free_tau to proceed")

    def evolve(level):
        mesh = make_mesh(level)
        h = mesh_size(mesh)
        tau = tau_override if tau_override is not None else protocol_tau(h, spacing)
        config = StepConfig(tau=tau, density=density, **step_options)
        state = initial_state(mesh, config)
        snaps = {}
        for t in cps:
            target = int(round(t / tau))
            while state.step_index < target:
                state, _ = step(state, config)
            snaps[t] = state.mesh
        if progress:
            progress(f"level {level}: h={h:.4g} tau={tau:.4g} steps={state.step_index}")
        return h, tau, snaps

    _, _, ref = evolve(reference_level)
    table = ConvergenceTable()
    prev = {}
    for level in sorted(levels):
        h, tau, snaps = evolve(level)
        for t in cps:
            d = manifold_distance(snaps[t], ref[t], resolution, z_exact=z_exact)
            order = None
            if t in prev:
                ph, pe = prev[t]
                order = pair_order(pe, d.value, ph, h)
            table.rows.append(ConvergenceRow(level, h, tau, t, d.value, d.error_bound, order))
            prev[t] = (h, d.value)
    return table
