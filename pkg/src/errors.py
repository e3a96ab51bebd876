"""Exceptions raised across the unlimitd package."""


class UnlimitdError(Exception):
    """Base class for all package errors"""
    pass


class ContractViolationError(UnlimitdError, ValueError):
    """Arguments violate a shape or range contract"""
    pass


class NumericalConditioningError(UnlimitdError):
    """A symmetric positive-definite factorization failed even after jitter escalation"""

    def __init__(self, message, jitter_levels=None):
        super().__init__(message)
        self.jitter_levels = list(jitter_levels or [])


class SketchRankError(NumericalConditioningError):
    """The sketched core system of the FIM approximation is rank deficient"""
    pass


class TrainingAbortedError(NumericalConditioningError):
    """Meta-training stopped after consecutive conditioning failures"""
    pass


class UnsupportedMetricError(UnlimitdError):
    """Metric requested from a model that cannot provide it"""
    pass


class CheckpointError(UnlimitdError):
    """Malformed checkpoint or checkpoint incompatible with the requested use"""
    pass


class DataFormatError(UnlimitdError):
    """Malformed dataset or CSV input"""

    def __init__(self, message, path=None, line=None):
        location = ''
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ConfigError(UnlimitdError, ValueError):
    """Unknown keys or invalid values in a run configuration"""
    pass
