"""Exception types shared across the library."""


class FlowAlignError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(FlowAlignError):
    """Array dimensions disagree with the expected configuration."""


class NonFiniteError(FlowAlignError):
    """NaN or Inf encountered where finite values are required."""


class FormatError(FlowAlignError):
    """On-disk file has a bad magic, manifest, or is truncated."""


class RangeError(FlowAlignError):
    """Scalar argument outside its allowed range."""


class DegenerateInputError(FlowAlignError):
    """Too few samples for a statistical estimator."""


class EmptyMeshError(FlowAlignError):
    """Mesh with no usable triangles."""


class EmptyDatabaseError(FlowAlignError):
    """Retrieval database contains no entries."""


class MissingGroundTruthError(FlowAlignError):
    """A retrieval query has no matching database entry."""
