"""Exception hierarchy for the reconstruction pipeline.

Errors fall into two broad families used by the CLI for exit codes:
``DataError`` for malformed or insufficient inputs, ``NumericalError``
for solver and convergence failures.
"""


class DepthFaceError(Exception):
    """Base class for all pipeline errors."""


class DataError(DepthFaceError):
    """Input data is malformed, inconsistent, or insufficient."""


class NumericalError(DepthFaceError):
    """A numerical procedure failed to produce a usable result."""


# -- geometry ---------------------------------------------------------------

class UnreadableFile(DataError):
    """File is missing, unreadable, or not in a supported format."""


class MalformedMesh(DataError):
    """Mesh file violates structural constraints (bad index, non-finite coordinate)."""


class EmptyMesh(DataError):
    """Operation requires a mesh with at least one triangle."""


class MissingNormals(DataError):
    """Operation requires per-vertex normals that are not present."""


class DegenerateResult(NumericalError):
    """Interpolation produced a vector too short to normalize."""


# -- depth ingestion --------------------------------------------------------

class MissingIntrinsics(DataError):
    """Depth frame has no usable intrinsics sidecar."""


class DimensionMismatch(DataError):
    """Declared frame size disagrees with the payload length."""


class WrongCount(DataError):
    """Landmark file does not contain the expected number of entries."""


class MissingAnchor(DataError):
    """Landmark file lacks a required named anchor point."""


class DuplicateName(DataError):
    """Landmark names are not unique."""


class EmptyRegion(DataError):
    """Requested frame region contains too few valid depth samples."""


class DegenerateGeometry(DataError):
    """Back-projection produced no usable triangle."""


class TooFewValid(DataError):
    """Too few landmarks could be lifted to 3D for alignment."""


# -- alignment --------------------------------------------------------------

class DegenerateConfiguration(DataError):
    """Point configuration is rank-deficient for the requested fit."""


class NoConvergence(NumericalError):
    """Iterative registration failed to decrease its energy."""


class InsufficientLandmarks(DataError):
    """Too few shared landmarks to seed dense registration."""


# -- smoothing and fusion ---------------------------------------------------

class SolverFailure(NumericalError):
    """Sparse solver did not reach the requested residual."""


class NonManifoldEdge(DataError):
    """An edge is shared by more than two triangles."""


class SingularSystem(NumericalError):
    """Fusion system has unresolvable gauge freedom."""


# -- descriptors and retrieval ----------------------------------------------

class EmptySection(DataError):
    """No slicing plane intersects the mesh."""


class ShapeMismatch(DataError):
    """Descriptors were computed with incompatible sampling parameters."""


class ZeroVector(DataError):
    """Cannot compute angles of a zero-length vector."""


class EmptyPart(DataError):
    """Part mask selects no vertex with a valid normal."""


class TopologyMismatch(DataError):
    """Mesh does not share the registered template topology."""


class ParamMismatch(DataError):
    """Query descriptors disagree with the index sampling parameters."""


class UnknownId(DataError):
    """Requested id is not present in the ranking."""


class MissingSource(DataError):
    """A facial part has no retrieved source mesh."""
