"""Exception types shared across the package."""


class MvprojError(Exception):
    """Base class for all package errors."""


class ShapeError(MvprojError):
    """Operands have incompatible dimensions."""


class ConfigError(MvprojError):
    """Invalid configuration (bad value, failed schema validation, K > N_E, ...)."""


class DegenerateInputError(MvprojError):
    """An input is outside the operation's domain (zero-norm vector, all -inf row)."""


class ValidationError(MvprojError):
    """Malformed caller-supplied data (e.g. a target distribution that does not sum to 1)."""


class GraphError(MvprojError):
    """Gradient requested through a value that was not produced by recorded ops."""


class OracleError(MvprojError):
    """The finite-difference oracle detected a non-deterministic objective."""


class StateError(MvprojError):
    """Operation called in an invalid lifecycle state (e.g. recording into a closed task)."""


class GenerationError(MvprojError):
    """Synthetic stream generation could not satisfy its geometric constraints."""


class PretrainingError(MvprojError):
    """Backbone pretraining failed to reach the required accuracy floor."""


class StatisticsError(MvprojError):
    """Task statistics are unusable (too few samples, non-PSD covariance)."""


class CheckpointError(MvprojError):
    """Checkpoint refused: version mismatch, hash mismatch, or malformed file."""


class IncompleteRunError(MvprojError):
    """Metrics requested from a partially populated performance matrix."""
