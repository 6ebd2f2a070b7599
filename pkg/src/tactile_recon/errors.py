"""Exception types raised across the package."""


class TactileReconError(Exception):
    """Base class for all package errors."""


class GeometryError(TactileReconError, ValueError):
    pass


class MetricError(TactileReconError, ValueError):
    pass


class OccupancyError(TactileReconError, ValueError):
    pass


class PlannerError(TactileReconError, ValueError):
    pass


class ExplorationError(TactileReconError, RuntimeError):
    """Raised when an episode cannot make progress (e.g. object unreachable)."""


class ModelError(TactileReconError, ValueError):
    pass


class ModelFormatError(ModelError):
    """Bad magic, unsupported version or truncated model file."""


class TrainingDivergedError(TactileReconError, RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class GpisError(TactileReconError, ValueError):
    pass


class RegistrationError(TactileReconError, ValueError):
    pass


class ConfigError(TactileReconError, ValueError):
    pass
