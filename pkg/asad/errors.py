"""Exception hierarchy shared by the library and the command line."""


class SwimError(Exception):
    """Base class for every error raised by the asad package."""

    exit_code = 1


class ConfigError(SwimError):
    """Invalid or unknown configuration values."""

    exit_code = 1


class ShapeError(SwimError, ValueError):
    """An operation received arrays whose shapes break its contract."""

    exit_code = 2


class DataError(SwimError):
    """Manifest, data file, label or split problems."""

    exit_code = 2


class CheckpointError(SwimError):
    """Corrupt, truncated or incompatible checkpoint files."""

    exit_code = 2


class NonFiniteError(SwimError, ArithmeticError):
    """NaN or infinite values where finite numbers are required."""

    exit_code = 2


class TrainingError(SwimError):
    """Training could not proceed (empty partitions, divergence)."""

    exit_code = 2


class ModelStateError(SwimError, ValueError):
    """A model is used in a state it cannot serve, e.g. uncalibrated BatchNorm."""

    exit_code = 2


class InvariantError(SwimError):
    """An oracle or invariant check failed."""

    exit_code = 3
