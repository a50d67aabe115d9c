"""Exception types shared across the package."""


class TriStreamError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TriStreamError):
    """Tensor dimensions do not line up for the requested operation."""


class ConfigError(TriStreamError):
    """Invalid configuration or operation precondition (bad ids, empty
    context, fully-masked attention row, unsupported modality combo)."""


class GraphError(TriStreamError):
    """Autodiff graph misuse: non-scalar loss or reuse of a consumed graph."""


class NumericError(TriStreamError):
    """Non-finite values where finite math was required."""


class SchedulingError(TriStreamError):
    """Fusion window or alignment count ran ahead of the generated text."""


class SessionError(TriStreamError):
    """Streaming session reached an inconsistent state."""


class DataError(TriStreamError):
    """Corpus records or data files failed validation."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt or inconsistent with the expected config."""
