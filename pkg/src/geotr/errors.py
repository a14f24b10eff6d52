"""Exception hierarchy shared by every stage of the pipeline."""


class GeoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GeoError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GeoError, ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(GeoError, ValueError):
    """A numeric parameter is outside its valid range."""


class ConfigError(GeoError, ValueError):
    """Model or pipeline configuration is inconsistent."""


class DataError(GeoError, ValueError):
    """Loaded data does not match what the consumer expects."""


class NormalizationError(GeoError, ValueError):
    """A feature row cannot be projected onto the unit hypersphere."""


class EstimationError(GeoError, RuntimeError):
    """A pose could not be estimated from the given correspondences."""

    def __init__(self, message, degenerate=False):
        super().__init__(message)
        self.degenerate = degenerate


class LossError(GeoError, RuntimeError):
    """A loss is undefined for the given batch."""


class TrainingError(GeoError, RuntimeError):
    """A training step produced a non-finite loss."""


class GenerationError(GeoError, RuntimeError):
    """Synthetic data generation failed."""


class StageError(GeoError, RuntimeError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, digest, cause):
        super().__init__(f"stage '{stage}' failed on input {digest}: {cause}")
        self.stage = stage
        self.digest = digest
        self.cause = cause
