"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not conform."""


class TapeError(RuntimeError):
    """Illegal use of the gradient tape."""


class ConfigError(ValueError):
    """Bad, missing, or unknown configuration."""


class DataError(ValueError):
    """Malformed corpus, catalog, or token input."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""
