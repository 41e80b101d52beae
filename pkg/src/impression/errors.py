"""Exception hierarchy shared by all modules.

Every error carries a ``category`` used by the CLI/service layer to map
failures onto stable machine-readable categories (and exit codes).
"""


class ImpressionError(Exception):
    """Base class for all library errors."""

    category = "internal"


class ConfigError(ImpressionError):
    """Invalid hyperparameter, option, or configuration document."""

    category = "config"


class DimensionError(ImpressionError):
    """Shapes or geometries do not conform to an operation's contract."""

    category = "incompatible"


class DegenerateInputError(DimensionError):
    """Empty spatial extent, empty dataset, or similar degenerate input."""


class IncompatibleCodesError(ImpressionError):
    """Impression codes disagree on schema, fingerprint, or tap structure."""

    category = "incompatible"


class DataError(ImpressionError):
    """Unreadable, malformed, or otherwise unusable persisted data."""

    category = "io"


class CheckpointError(DataError):
    """Base for checkpoint file problems."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint payload does not parse (bad magic, garbage content)."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends before the declared payload does."""


class CodeFileError(DataError):
    """Impression-code JSON document is malformed or violates invariants."""


class NumericError(ImpressionError):
    """A documented operation produced NaN/Inf from finite inputs."""

    category = "numeric"


class TrainingDivergedError(NumericError):
    """Training loss became non-finite; retry with a lower learning rate."""


class OptimizationDivergedError(NumericError):
    """Image optimization produced a non-finite loss."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class ContractError(ImpressionError):
    """An API was called outside its documented contract."""


class StateError(ImpressionError):
    """An object was used in an invalid lifecycle state (e.g. tape reuse)."""
