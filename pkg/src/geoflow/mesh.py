"""Closed oriented triangle meshes: generators, validation, measurement, OBJ I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MeshError, ObjParseError, UnsupportedElementError

MAX_SUBDIVISIONS = 7


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Vertex positions (K, 3) plus triangles (J, 3) ordered counter-clockwise seen from outside.

    Arrays are copied and frozen on construction, so a mesh can be shared freely.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = self.triangles
        # an already frozen index array is shared, so topology caches stay valid
        if not (isinstance(t, np.ndarray) and t.dtype == np.int64 and not t.flags.writeable):
            t = np.array(t, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (K, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (J, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.triangles)

    def flipped(self) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices, self.triangles[:, [0, 2, 1]])


@dataclass(frozen=True)
class MeshReport:
    is_closed: bool
    is_oriented: bool
    min_area: float
    euler_characteristic: int
    genus: int | None
    n_vertices: int
    n_edges: int
    n_triangles: int
    min_valence: int

    @property
    def is_valid(self) -> bool:
        return self.is_closed and self.is_oriented and self.min_area > 0

    def __str__(self):
        lines = [
            f"vertices: {self.n_vertices}",
            f"edges: {self.n_edges}",
            f"triangles: {self.n_triangles}",
            f"closed: {self.is_closed}",
            f"oriented: {self.is_oriented}",
            f"min_area: {self.min_area:.6g}",
            f"min_valence: {self.min_valence}",
            f"euler_characteristic: {self.euler_characteristic}",
            f"genus: {'n/a' if self.genus is None else self.genus}",
        ]
        return "\n".join(lines)


# -- generators ---------------------------------------------------------------


def _icosahedron():
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(vertices, faces):
    """Split every triangle into four through edge midpoints projected back to the unit sphere."""
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mid = vertices[uniq[:, 0]] + vertices[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nf = len(faces)
    m01 = inv[:nf] + len(vertices)
    m12 = inv[nf : 2 * nf] + len(vertices)
    m20 = inv[2 * nf :] + len(vertices)
    a, b, c = faces.T
    new = np.concatenate(
        [
            np.stack([a, m01, m20], axis=1),
            np.stack([m01, b, m12], axis=1),
            np.stack([m20, m12, c], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    return np.vstack([vertices, mid]), new


def make_icosphere(subdivisions: int, radius: float = 1.0, max_subdivisions: int = MAX_SUBDIVISIONS) -> SurfaceMesh:
    """Geodesic sphere with ``20 * 4**subdivisions`` triangles, every vertex at distance ``radius``."""
    if subdivisions < 0 or int(subdivisions) != subdivisions:
        raise MeshError("subdivisions must be a non-negative integer")
    if subdivisions > max_subdivisions:
        raise MeshError(f"subdivisions={subdivisions} exceeds the cap of {max_subdivisions}")
    if not radius > 0:
        raise MeshError("radius must be positive")
    v, f = _icosahedron()
    for _ in range(int(subdivisions)):
        v, f = _subdivide(v, f)
    return improve_corner_order(SurfaceMesh(radius * v, f))


def make_ellipsoid(a: float, b: float, subdivisions: int) -> SurfaceMesh:
    """Surface ``x**2/a + y**2/b + z**2 = 1`` from a mapped unit icosphere."""
    if not (a > 0 and b > 0):
        raise MeshError("ellipsoid parameters a and b must be positive")
    sphere = make_icosphere(subdivisions, 1.0)
    return improve_corner_order(sphere.with_vertices(sphere.vertices * np.array([math.sqrt(a), math.sqrt(b), 1.0])))


def make_torus(R: float, r: float, n_major: int, n_minor: int) -> SurfaceMesh:
    """Torus of revolution about the z axis on an ``n_major x n_minor`` parameter grid."""
    if not (r > 0 and R > 0):
        raise MeshError("torus radii must be positive")
    if R <= r:
        raise MeshError(f"R={R} <= r={r} gives a self-intersecting torus")
    if n_major < 3 or n_minor < 3:
        raise MeshError("torus grid needs at least 3 x 3 points")
    phi = 2.0 * np.pi * np.arange(n_major) / n_major
    theta = 2.0 * np.pi * np.arange(n_minor) / n_minor
    P, T = np.meshgrid(phi, theta, indexing="ij")
    rho = R + r * np.cos(T)
    v = np.stack([rho * np.cos(P), rho * np.sin(P), r * np.sin(T)], axis=-1).reshape(-1, 3)

    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ip, jp = (i + 1) % n_major, (j + 1) % n_minor
    p00 = i * n_minor + j
    p10 = ip * n_minor + j
    p11 = ip * n_minor + jp
    p01 = i * n_minor + jp
    # (phi, theta) is a right-handed chart for the outward normal; every quad is cut along p00-p11
    t1 = np.stack([p00, p10, p11], axis=1)
    t2 = np.stack([p00, p11, p01], axis=1)
    return improve_corner_order(SurfaceMesh(v, np.concatenate([t1, t2])))


def make_octahedron(radius: float = 1.0) -> SurfaceMesh:
    v = radius * np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
    )
    f = [
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ]
    return improve_corner_order(SurfaceMesh(v, f))


def make_cube() -> SurfaceMesh:
    """Unit cube [0, 1]^3 as 12 outward triangles."""
    v = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
        dtype=float,
    )
    f = [
        [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
        [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7],
    ]
    return improve_corner_order(SurfaceMesh(v, f))


# -- corner ordering ----------------------------------------------------------

# Generic direction for the reference tangent field; it is not parallel to any
# coordinate axis, so symmetric generator output does not hit its singular points.
_REFERENCE_AXIS = np.array([0.3, 0.5, 0.81])


def _tangent_frames(vertices, triangles):
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    direction = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(direction, axis=1)
    if np.any(area <= 0):
        raise MeshError("corner ordering needs non-degenerate triangles")
    normal = direction / (2.0 * area)[:, None]
    t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    t2 = e2 / np.linalg.norm(e2, axis=1, keepdims=True)
    return area, normal, t1, t2


def tangent_quality(mesh: SurfaceMesh) -> np.ndarray:
    """Per-vertex conditioning of the lumped normal and tangent averages.

    Returns ``|det[n_k, t1_k, t2_k]| / M_k**3`` where each vector is the
    area/3-weighted sum over incident triangles and ``M_k`` the lumped mass.
    The value is scale free and lies in ``[0, 1]``; zero means the averaged
    frame is singular.
    """
    area, normal, t1, t2 = _tangent_frames(mesh.vertices, mesh.triangles)
    w = np.repeat(area / 3.0, 3)
    idx = mesh.triangles.ravel()
    K = mesh.n_vertices

    def acc(v):
        v = np.repeat(v, 3, axis=0)
        return np.stack([np.bincount(idx, weights=w * v[:, d], minlength=K) for d in range(3)], axis=1)

    mass = np.bincount(idx, weights=w, minlength=K)
    det = np.abs(np.linalg.det(np.stack([acc(normal), acc(t1), acc(t2)], axis=1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mass > 0, det / mass**3, 0.0)


def improve_corner_order(
    mesh: SurfaceMesh, threshold: float = 0.3, sweeps: int = 5, axis=None, keep_better: bool = True
) -> SurfaceMesh:
    """Cyclically rotate triangle index triples so vertex-averaged tangents stay independent.

    The per-face tangents run from the first corner to the other two, so
    their lumped vertex averages depend on which corner comes first.  On
    symmetric meshes they can cancel exactly.  Each triangle first starts at
    the corner whose outgoing edge best follows a smooth reference field;
    vertices still below ``threshold`` are then repaired by trying the three
    rotations of each incident triangle.  Orientation, vertex order and
    geometry are untouched.  The input ordering is kept unless the result has
    a strictly better worst vertex, or always replaced when ``keep_better`` is
    false.  ``axis`` sets the reference direction.
    """
    V = mesh.vertices
    T = mesh.triangles.copy()
    K = mesh.n_vertices
    if mesh.n_triangles == 0:
        return mesh
    area, normal, _, _ = _tangent_frames(V, T)

    axis = _REFERENCE_AXIS if axis is None else np.asarray(axis, dtype=float)
    p = V[T]
    field = axis - (normal @ axis)[:, None] * normal
    score = np.empty((len(T), 3))
    for r in range(3):
        e = p[:, (r + 1) % 3] - p[:, r]
        score[:, r] = np.einsum("jd,jd->j", e / np.linalg.norm(e, axis=1, keepdims=True), field)
    shift = np.argmax(score, axis=1)
    T = np.take_along_axis(T, (np.arange(3)[None, :] + shift[:, None]) % 3, axis=1)

    w = area / 3.0
    _, _, t1, t2 = _tangent_frames(V, T)
    t1 *= w[:, None]
    t2 *= w[:, None]
    mass = np.bincount(T.ravel(), weights=np.repeat(w, 3), minlength=K)
    nsum = np.zeros((K, 3))
    s1 = np.zeros((K, 3))
    s2 = np.zeros((K, 3))
    for c in range(3):
        np.add.at(nsum, T[:, c], w[:, None] * normal)
        np.add.at(s1, T[:, c], t1)
        np.add.at(s2, T[:, c], t2)

    def q(k):
        return abs(np.linalg.det(np.array([nsum[k], s1[k], s2[k]]))) / mass[k] ** 3

    incident = [[] for _ in range(K)]
    for j, tri in enumerate(T):
        for k in tri:
            incident[k].append(j)

    for _ in range(sweeps):
        qual = np.array([q(k) for k in range(K)])
        weak = np.flatnonzero(qual < threshold)
        if weak.size == 0:
            break
        changed = False
        for k in weak[np.argsort(qual[weak])]:
            for j in incident[k]:
                corners = T[j]
                best = None
                for r in range(3):
                    tri = np.roll(corners, -r)
                    a = V[tri[1]] - V[tri[0]]
                    b = V[tri[2]] - V[tri[0]]
                    d1 = w[j] * a / np.linalg.norm(a) - t1[j]
                    d2 = w[j] * b / np.linalg.norm(b) - t2[j]
                    s1[corners] += d1
                    s2[corners] += d2
                    worst = min(q(v) for v in corners)
                    s1[corners] -= d1
                    s2[corners] -= d2
                    if best is None or worst > best[0] + 1e-12:
                        best = (worst, r, tri, d1, d2)
                if best[1] != 0:
                    _, _, tri, d1, d2 = best
                    s1[corners] += d1
                    s2[corners] += d2
                    t1[j] += d1
                    t2[j] += d2
                    T[j] = tri
                    changed = True
        if not changed:
            break

    candidate = SurfaceMesh(V, T)
    if not keep_better or tangent_quality(candidate).min() > tangent_quality(mesh).min():
        return candidate
    return mesh


def _cycle_axes():
    # orthonormal frame around the reference axis, tilted off the coordinate planes
    q, _ = np.linalg.qr(np.array([_REFERENCE_AXIS, [0.9, -0.2, 0.1], [0.1, 0.8, -0.5]]).T)
    return [q[:, i] for i in range(3)]


def corner_orderings(mesh: SurfaceMesh, count: int = 3, min_quality: float = 0.5) -> tuple:
    """Alternative corner orderings of ``mesh`` with tangent singularities in different places.

    The first entry is the mesh's own triangle array.  The others follow
    reference fields along further orthogonal axes; an ordering is dropped
    when its worst :func:`tangent_quality` falls below ``min_quality`` times
    that of the original.  All arrays are read-only.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    own = np.array(mesh.triangles, dtype=np.int64)
    own.setflags(write=False)
    out = [own]
    floor = min_quality * float(tangent_quality(mesh).min()) if mesh.n_triangles else 0.0
    for axis in _cycle_axes()[1:count]:
        cand = improve_corner_order(mesh, axis=axis, keep_better=False)
        if tangent_quality(cand).min() >= floor:
            t = np.array(cand.triangles, dtype=np.int64)
            t.setflags(write=False)
            out.append(t)
    return tuple(out)


# -- measurement --------------------------------------------------------------


def triangle_areas(mesh: SurfaceMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def validate(mesh: SurfaceMesh) -> MeshReport:
    """Topological and geometric sanity report; problems are reported, never raised."""
    t = mesh.triangles
    K, J = mesh.n_vertices, mesh.n_triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    if J:
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        n_edges = len(counts)
        is_closed = bool(np.all(counts == 2))
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        # every directed edge once, and its reverse present
        is_oriented = bool(is_closed and np.all(dcounts == 1))
        min_area = float(triangle_areas(mesh).min())
    else:
        n_edges, is_closed, is_oriented, min_area = 0, False, False, 0.0
    valence = np.bincount(t.ravel(), minlength=K)
    chi = K - n_edges + J
    genus = (2 - chi) // 2 if is_closed and is_oriented and (2 - chi) % 2 == 0 else None
    return MeshReport(
        is_closed=is_closed,
        is_oriented=is_oriented,
        min_area=min_area,
        euler_characteristic=int(chi),
        genus=genus,
        n_vertices=K,
        n_edges=int(n_edges),
        n_triangles=J,
        min_valence=int(valence.min()) if K else 0,
    )


def mesh_size(mesh: SurfaceMesh) -> float:
    """Largest square root of a triangle area."""
    return float(np.sqrt(triangle_areas(mesh).max()))


def enclosed_volume(mesh: SurfaceMesh, check: bool = True) -> float:
    """Signed volume by the divergence theorem; positive for outward orientation."""
    if check:
        report = validate(mesh)
        if not (report.is_closed and report.is_oriented):
            raise MeshError("enclosed_volume needs a closed, consistently oriented mesh")
    p = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->", p[:, 0], np.cross(p[:, 1], p[:, 2])) / 6.0)


# -- OBJ ----------------------------------------------------------------------

_IGNORED_OBJ = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib"}


def write_obj(mesh: SurfaceMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def _face_index(token, n_vertices, lineno):
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"bad face index {token!r}", lineno) from None
    if idx < 0:
        idx = n_vertices + idx + 1
    if idx < 1:
        raise ObjParseError(f"face index {token!r} out of range", lineno)
    return idx - 1


def read_obj(path) -> SurfaceMesh:
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if key == "v":
                if len(rest) < 3:
                    raise ObjParseError("vertex record needs three coordinates", lineno)
                try:
                    vertices.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in {line!r}", lineno) from None
            elif key == "f":
                if len(rest) != 3:
                    raise UnsupportedElementError(
                        f"face with {len(rest)} vertices (only triangles are supported): {line!r}", lineno
                    )
                faces.append([_face_index(tok, len(vertices), lineno) for tok in rest])
            elif key in _IGNORED_OBJ:
                continue
            else:
                raise ObjParseError(f"unsupported record {key!r}", lineno)
    if not vertices or not faces:
        raise ObjParseError(f"{path}: no vertices or faces found")
    faces = np.array(faces, dtype=np.int64)
    if faces.max() >= len(vertices):
        raise ObjParseError(f"{path}: face references vertex {faces.max() + 1} of {len(vertices)}")
    return SurfaceMesh(np.array(vertices), faces)
