"""Exception hierarchy shared by all geoflow modules."""


class GeoflowError(Exception):
    """Base class for every error raised by this package."""


class MeshError(GeoflowError, ValueError):
    """Invalid mesh input: bad parameters, open surface, size cap exceeded."""


class ObjParseError(GeoflowError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedElementError(ObjParseError):
    """OBJ face record that is not a triangle."""


class DegenerateElementError(GeoflowError, ValueError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class SolverError(GeoflowError, RuntimeError):
    """Linear or nonlinear solve failure."""


class ConditioningError(SolverError):
    """Vertex-averaged tangent pair too close to parallel."""


class NewtonConvergenceError(SolverError):
    def __init__(self, message, iterations=None, update_norms=None):
        self.iterations = iterations
        self.update_norms = list(update_norms or [])
        super().__init__(message)


class MeshCollapseError(SolverError):
    def __init__(self, message, step_index=None, last_state=None):
        self.step_index = step_index
        self.last_state = last_state
        super().__init__(message)


class ProtocolError(GeoflowError, ValueError):
    """Convergence-study setup that breaks the refinement protocol."""
