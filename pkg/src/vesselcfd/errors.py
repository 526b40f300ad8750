"""Exception types shared across the package."""


class VesselCFDError(Exception):
    """Base class for all package errors."""


class FormatError(VesselCFDError):
    """Malformed or unsupported file content."""


class CapacityError(VesselCFDError):
    """Declared dimensions exceed what can be addressed in memory."""


class VolumeWriteError(VesselCFDError):
    """Volume or mesh could not be written."""


class ResolutionError(VesselCFDError):
    """Geometry too thin for the requested grid."""


class EmptyMeshError(VesselCFDError):
    pass


class DiagnosticError(VesselCFDError):
    """Mesh fails a validity requirement of the requested operation."""


class PreconditionError(VesselCFDError):
    pass


class CutFailureError(VesselCFDError):
    """Automatic inlet/outlet cutting failed (short centerline branch)."""


class DomainSplitError(VesselCFDError):
    """Cut planes did not produce a single connected, well-bounded fluid domain."""


class DivergenceError(VesselCFDError):
    pass


class UndefinedMetricError(VesselCFDError):
    """Metric is undefined for the inputs (e.g. empty mask)."""


class ConsistencyError(VesselCFDError):
    pass


class DegenerateTargetError(VesselCFDError):
    """Heatmap target has no positive voxels."""
