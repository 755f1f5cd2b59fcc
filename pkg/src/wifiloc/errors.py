"""Exception taxonomy shared across the package."""


class WifilocError(Exception):
    """Base class for all package-specific errors."""


class PlanFormatError(WifilocError):
    """Floor-plan document is malformed; message names the offending field."""


class DegenerateMapError(WifilocError):
    """Floor plan has no free cells."""


class OutOfBoundsError(WifilocError):
    """A pose lies outside the floor-plan extent."""


class WalkTimeout(WifilocError):
    """Random walk hit its step cap before reaching the goal.

    Carries the partial trajectory built so far in ``trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(WifilocError):
    """Invalid or inconsistent configuration."""


class DegenerateDataError(WifilocError):
    """Training data contains a single class."""


class WeightsFormatError(WifilocError):
    """Weights file is truncated, corrupt, or version-incompatible."""


class ArchitectureMismatchError(WeightsFormatError):
    """Weights file holds a different architecture than the caller expects."""


class DataAssociationError(WifilocError):
    """An observation references an access point id not present in the map."""


class ScanLogError(WifilocError):
    """Scan log file is malformed; message names the offending row."""


class ValidationError(WifilocError):
    """Input data fails semantic validation (schema is fine, content is not)."""
