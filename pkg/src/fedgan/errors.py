"""Exception hierarchy shared across the package."""


class FedGanError(Exception):
    """Base class for every error raised by fedgan."""


class LayoutError(FedGanError, ValueError):
    """Weight vectors or batches whose shapes do not match a network layout."""


class NonFiniteWeightsError(FedGanError, FloatingPointError):
    """A weight vector picked up NaN or inf values."""


class IdxFormatError(FedGanError, ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class TopologyError(FedGanError, ValueError):
    pass


class AggregationError(FedGanError, ValueError):
    pass


class ConfigError(FedGanError, ValueError):
    """Invalid configuration. ``field`` holds the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CorruptCheckpointError(FedGanError, ValueError):
    pass


class ClassifierGateError(FedGanError, RuntimeError):
    """The frozen scoring classifier failed its held-out accuracy gate."""
