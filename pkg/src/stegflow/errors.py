"""Exception taxonomy shared across the package."""


class StegflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StegflowError):
    """Operands have incompatible shapes for the requested operation."""


class TapeError(StegflowError):
    """Illegal use of the gradient tape (reuse, detached backward, ...)."""


class NonFiniteError(StegflowError):
    """NaN or Inf detected at a numeric check barrier."""


class DataError(StegflowError):
    """Dataset ingestion or validation failure."""


class TrainingDiverged(StegflowError):
    """Training loss became non-finite; last good checkpoint is retained."""


class CheckpointError(StegflowError):
    """Malformed or incompatible checkpoint / latent file."""


class CodecError(StegflowError):
    """Bit-level embed/extract contract violation."""


class CapacityError(CodecError):
    """Payload does not fit the plan's capacity."""


class ConfigError(StegflowError):
    """Invalid run configuration (usage-class error for the CLI)."""
