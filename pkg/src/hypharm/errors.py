"""Exception types raised across the package."""


class HypharmError(Exception):
    """Base class for all package errors."""


class ComplexSpecError(HypharmError):
    """Malformed structural description of a complex."""


class EmptyPartitionClass(ComplexSpecError):
    """An edge class with no slots."""


class DisconnectedComplex(ComplexSpecError):
    """The face-adjacency graph is not connected."""


class InconsistentOrientation(ComplexSpecError):
    """A gluing class that cannot be realized by orientation-preserving
    edge identifications (a slot glued to itself, or a bad sign value)."""


class IncompleteAtVertex(HypharmError):
    """Developing the faces around a vertex fails to close up to a
    horizontal translation; carries the offending log-scale mismatch."""

    def __init__(self, vertex_id, mismatch):
        self.vertex_id = vertex_id
        self.mismatch = mismatch
        super().__init__(
            f"metric incomplete at vertex {vertex_id}: "
            f"log-scale mismatch {mismatch:.6g}"
        )


class IncompleteMetric(HypharmError):
    """An operation requiring a complete metric received one that is not."""


class MeshQualityFailure(HypharmError):
    """Triangle quality below the configured bound after refinement attempts."""


class InvalidTarget(HypharmError):
    """A map node image left the upper half-plane (v <= 0)."""


class LineSearchFailure(HypharmError):
    """No decreasing step could be found; best iterate is attached."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class BarrierInfeasible(HypharmError):
    """Orientation barrier requested from an orientation-reversing start."""


class DegreeInconsistent(HypharmError):
    """Degree samples disagree; the map is far from a regular covering."""
