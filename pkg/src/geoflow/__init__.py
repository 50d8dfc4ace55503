"""Energy-stable parametric finite elements for curvature-driven flows of closed surfaces."""

from .densities import AREA, MEAN_CURVATURE_INTEGRAL, QUARTIC, WILLMORE, EnergyDensity, get_density
from .errors import (
    ConditioningError,
    DegenerateElementError,
    GeoflowError,
    MeshCollapseError,
    MeshError,
    NewtonConvergenceError,
    ObjParseError,
    ProtocolError,
    SolverError,
    UnsupportedElementError,
)
from .mesh import (
    SurfaceMesh,
    enclosed_volume,
    make_ellipsoid,
    make_icosphere,
    make_octahedron,
    make_torus,
    mesh_size,
    read_obj,
    validate,
    write_obj,
)
from .solver import FlowState, StepConfig, initial_state, run, step

__version__ = "0.1.0"

__all__ = [
    "AREA",
    "MEAN_CURVATURE_INTEGRAL",
    "QUARTIC",
    "WILLMORE",
    "EnergyDensity",
    "get_density",
    "ConditioningError",
    "DegenerateElementError",
    "GeoflowError",
    "MeshCollapseError",
    "MeshError",
    "NewtonConvergenceError",
    "ObjParseError",
    "ProtocolError",
    "SolverError",
    "UnsupportedElementError",
    "SurfaceMesh",
    "enclosed_volume",
    "make_ellipsoid",
    "make_icosphere",
    "make_octahedron",
    "make_torus",
    "mesh_size",
    "read_obj",
    "validate",
    "write_obj",
    "FlowState",
    "StepConfig",
    "initial_state",
    "run",
    "step",
]
