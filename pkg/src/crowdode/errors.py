"""Exception types shared across the package."""


class CrowdError(Exception):
    """Base class for all package errors."""


class ShapeError(CrowdError, ValueError):
    pass


class CapacityError(CrowdError):
    """Rejection sampling could not place the requested agents."""


class DegenerateGeometryError(CrowdError):
    """Two agents (or an agent and a wall point) coincide."""


class NumericalBlowupError(CrowdError):
    """Raised when a state or derivative becomes non-finite or explodes."""

    def __init__(self, message, time=None, sample_id=None):
        super().__init__(message)
        self.time = time
        self.sample_id = sample_id


class TrainingDivergedError(CrowdError):
    """Every sample in an epoch was skipped."""


class ConfigError(CrowdError, ValueError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
