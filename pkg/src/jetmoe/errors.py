"""Exception hierarchy shared by every jetmoe module."""


class JetMoeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(JetMoeError, ValueError):
    pass


class DimensionError(JetMoeError, ValueError):
    pass


class RangeError(JetMoeError, IndexError):
    pass


class StateError(JetMoeError, RuntimeError):
    pass


class PrecisionError(JetMoeError, TypeError):
    pass


class NumericError(JetMoeError, ArithmeticError):
    """Raised on non-finite values (gradients, losses)."""


class DegenerateBatchError(JetMoeError, ValueError):
    """Raised when a batch or corpus carries nothing to average over."""


class DataError(JetMoeError, ValueError):
    """Malformed corpus or dataset input."""


class CheckpointError(JetMoeError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
