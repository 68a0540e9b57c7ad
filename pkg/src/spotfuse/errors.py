"""Exception types shared across the package."""


class SpotfuseError(Exception):
    """Base class for all package-specific failures."""


class AlignmentMismatchError(SpotfuseError):
    """Spot identifiers disagree between input files."""


class DataValidationError(SpotfuseError):
    """An input matrix contains NaN/Inf or malformed rows."""


class GraphStateError(SpotfuseError):
    """A graph operation was applied in the wrong state (e.g. double normalization)."""


class ConfigurationError(SpotfuseError):
    """Model/config dimensions or options are inconsistent."""


class TrainingError(SpotfuseError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(SpotfuseError):
    """A checkpoint is unreadable or inconsistent with the data it is applied to."""
