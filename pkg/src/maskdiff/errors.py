"""Exception types shared across the package."""


class MaskdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskdiffError, ValueError):
    """Invalid configuration value or combination (also raised for bad user input)."""


class ShapeError(MaskdiffError, ValueError):
    """Tensor/array shape does not match the operation's contract."""


class ContractError(MaskdiffError, ValueError):
    """A call violated an explicit API contract (e.g. nonzero noise at the final step)."""


class DataError(MaskdiffError, ValueError):
    """Corrupt, truncated or version-mismatched on-disk data."""


class CheckpointError(MaskdiffError, ValueError):
    """Checkpoint container is invalid or incompatible with the requested config."""


class TrainingError(MaskdiffError, RuntimeError):
    """Training diverged or otherwise failed at runtime."""
