"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericError -> 3,
PropertyError -> 4.
"""


class GroupcastError(Exception):
    """Base class for all package errors."""


class DimensionError(GroupcastError):
    """Tensor shapes are incompatible with the requested operation."""


class EmptySetError(GroupcastError):
    """An attention block received an empty key set."""


class GraphError(GroupcastError):
    """Misuse of the differentiation tape (non-scalar loss, no recording)."""


class ConfigError(GroupcastError):
    """Invalid or unknown configuration keys / values."""


class NumericError(GroupcastError):
    """Numeric failure during training or evaluation (NaN loss, ...)."""


class PositiveDefinitenessError(NumericError):
    """A covariance slice failed the Cholesky factorization.

    Carries the (t, d) index of the offending slice when known.
    """

    def __init__(self, message, t=None, d=None):
        super().__init__(message)
        self.t = t
        self.d = d


class DatasetError(GroupcastError):
    """On-disk dataset is malformed."""


class UnsupportedVersionError(DatasetError):
    """Manifest declares a format version this build cannot read."""


class TruncatedBlobError(DatasetError):
    """Binary payload is shorter than the index claims; names the scene."""

    def __init__(self, message, scene_id=None):
        super().__init__(message)
        self.scene_id = scene_id


class ProtocolError(GroupcastError):
    """An evaluation protocol was configured inconsistently with the data."""


class PropertyError(GroupcastError):
    """A machine-checked model property (e.g. equivariance) failed."""


class LockError(GroupcastError):
    """Another process holds the output-directory lock."""
