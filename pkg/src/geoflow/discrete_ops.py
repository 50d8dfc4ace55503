"""Piecewise-linear differential operators on a fixed polygonal surface.

Scalar fields are arrays of shape (K,), vector fields (K, 3), and face matrix
fields (J, 3, 3).  Every operator is a pure function of the mesh, its cached
:class:`FaceFrames` and the fields passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateElementError, MeshError
from .mesh import SurfaceMesh


@dataclass(frozen=True, eq=False)
class FaceFrames:
    """Per-triangle geometry of one mesh.

    ``grad_hat[j, l]`` is the (constant) surface gradient on triangle ``j`` of
    the hat function attached to its ``l``-th corner.
    """

    triangles: np.ndarray
    n_vertices: int
    direction: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    tangent1: np.ndarray
    tangent2: np.ndarray
    grad_hat: np.ndarray

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def lumped_mass(self) -> np.ndarray:
        """Mass-lumped weight of each vertex, a third of the adjacent area."""
        return np.bincount(
            self.triangles.ravel(), weights=np.repeat(self.area / 3.0, 3), minlength=self.n_vertices
        )

    def corner_sum(self, per_face: np.ndarray) -> np.ndarray:
        """Accumulate per-face values onto all three corner vertices."""
        return scatter_corners(self.triangles, np.repeat(per_face[:, None], 3, axis=1), self.n_vertices)


def scatter_corners(triangles, values, n_vertices):
    """Sum ``values[j, l, ...]`` into the vertex ``triangles[j, l]``."""
    values = np.asarray(values)
    idx = triangles.ravel()
    tail = values.shape[2:]
    flat = values.reshape(len(idx), -1)
    out = np.empty((n_vertices, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n_vertices)
    return out.reshape((n_vertices,) + tail)


def face_frames(mesh: SurfaceMesh) -> FaceFrames:
    t = mesh.triangles
    p = mesh.vertices[t]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    direction = np.cross(e1, e2)
    jnorm = np.linalg.norm(direction, axis=1)
    scale = max(float(np.abs(mesh.vertices).max()), 1.0) if mesh.n_vertices else 1.0
    bad = np.flatnonzero(~(jnorm > 1e-14 * scale**2))
    if bad.size:
        raise DegenerateElementError(f"triangle {bad[0]} has zero area", index=int(bad[0]))
    normal = direction / jnorm[:, None]
    tangent1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    tangent2 = e2 / np.linalg.norm(e2, axis=1, keepdims=True)
    # gradient of the hat at corner l: (q_{l+1} - q_{l+2}) x n / |J|
    opposite = np.stack([p[:, 1] - p[:, 2], p[:, 2] - p[:, 0], p[:, 0] - p[:, 1]], axis=1)
    grad_hat = np.cross(opposite, normal[:, None, :]) / jnorm[:, None, None]
    return FaceFrames(
        triangles=t,
        n_vertices=mesh.n_vertices,
        direction=direction,
        normal=normal,
        area=0.5 * jnorm,
        tangent1=tangent1,
        tangent2=tangent2,
        grad_hat=grad_hat,
    )


def _check_length(field, n, what):
    field = np.asarray(field, dtype=float)
    if field.shape[0] != n:
        raise ValueError(f"{what} has {field.shape[0]} entries, mesh has {n} vertices")
    return field


def surface_gradient_scalar(mesh: SurfaceMesh, frames: FaceFrames, field) -> np.ndarray:
    """Face-constant gradient (J, 3) of a nodal scalar field."""
    field = _check_length(field, mesh.n_vertices, "scalar field")
    if field.ndim != 1:
        raise ValueError("scalar field must be one-dimensional")
    return np.einsum("jl,jld->jd", field[mesh.triangles], frames.grad_hat)


def surface_gradient_vector(mesh: SurfaceMesh, frames: FaceFrames, field) -> np.ndarray:
    """Face-constant Jacobian (J, 3, 3); row i is the gradient of component i."""
    field = _check_length(field, mesh.n_vertices, "vector field")
    if field.ndim != 2 or field.shape[1] != 3:
        raise ValueError("vector field must have shape (K, 3)")
    return np.einsum("jli,jld->jid", field[mesh.triangles], frames.grad_hat)


NORMAL_WEIGHTINGS = ("area", "angle")


def vertex_normals(mesh: SurfaceMesh, frames: FaceFrames, weighting: str = "area") -> np.ndarray:
    """Unit vertex normals from a weighted average of incident face normals.

    ``weighting="area"`` (default) weights each face by its area; ``"angle"``
    by the interior angle at the vertex.
    """
    if weighting == "area":
        # area * normal is half the direction vector
        contrib = np.repeat(0.5 * frames.direction[:, None, :], 3, axis=1)
    elif weighting == "angle":
        p = mesh.vertices[mesh.triangles]
        a = np.roll(p, -1, axis=1) - p
        b = np.roll(p, -2, axis=1) - p
        cos = np.einsum("jld,jld->jl", a, b) / (np.linalg.norm(a, axis=2) * np.linalg.norm(b, axis=2))
        angle = np.arccos(np.clip(cos, -1.0, 1.0))
        contrib = angle[:, :, None] * frames.normal[:, None, :]
    else:
        raise ValueError(f"unknown normal weighting {weighting!r}; expected one of {NORMAL_WEIGHTINGS}")
    acc = scatter_corners(mesh.triangles, contrib, mesh.n_vertices)
    length = np.linalg.norm(acc, axis=1)
    ref = np.abs(contrib).max() if contrib.size else 1.0
    bad = np.flatnonzero(~(length > 1e-12 * ref))
    if bad.size:
        raise DegenerateElementError(f"vertex {bad[0]} has a vanishing averaged normal", index=int(bad[0]))
    return acc / length[:, None]


def weingarten(mesh: SurfaceMesh, frames: FaceFrames, w) -> np.ndarray:
    """Discrete Weingarten map: the face-wise surface gradient of the vertex normal field."""
    return surface_gradient_vector(mesh, frames, w)


def inner_lumped_scalar(frames: FaceFrames, u, v) -> float:
    u = _check_length(u, frames.n_vertices, "u")
    v = _check_length(v, frames.n_vertices, "v")
    return float(np.dot(frames.lumped_mass(), u * v))


def inner_lumped_vector(frames: FaceFrames, u, v) -> float:
    u = _check_length(u, frames.n_vertices, "u")
    v = _check_length(v, frames.n_vertices, "v")
    return float(np.dot(frames.lumped_mass(), np.einsum("kd,kd->k", u, v)))


def inner_lumped_matrix(frames: FaceFrames, U, V, weight=None) -> float:
    """Lumped Hilbert-Schmidt product of face-constant matrix fields.

    ``weight`` is an optional nodal scalar multiplying the integrand; it enters
    through its corner values, so each face sees the mean of its three corners.
    """
    hs = np.einsum("jab,jab->j", U, V)
    if weight is None:
        return float(np.dot(frames.area, hs))
    weight = _check_length(weight, frames.n_vertices, "weight")
    return float(np.dot(frames.area * weight[frames.triangles].mean(axis=1), hs))


def initial_curvature(mesh: SurfaceMesh, frames: FaceFrames, A0) -> np.ndarray:
    """Nodal mean curvature as the lumped L2 projection of trace(A0)."""
    mass = frames.lumped_mass()
    if np.any(mass <= 0):
        k = int(np.flatnonzero(mass <= 0)[0])
        raise MeshError(f"vertex {k} is not referenced by any triangle")
    trace = np.trace(A0, axis1=1, axis2=2)
    return frames.corner_sum(frames.area * trace / 3.0) / mass
