"""Exception hierarchy shared across the package.

The CLI maps the three top-level kinds onto exit codes (config 2, data 3,
numeric 4).
"""


class MicapError(Exception):
    pass


class ConfigError(MicapError, ValueError):
    """Invalid configuration, shapes or contract violations at call sites."""


class DataError(MicapError):
    """Unreadable, corrupt or inconsistent on-disk artifacts."""


class NumericError(MicapError, ArithmeticError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""


class ShapeError(ConfigError):
    pass


class MaskError(ConfigError):
    pass


class CapacityError(ConfigError):
    pass


class TokenizationError(ConfigError):
    pass


class RangeError(ConfigError, IndexError):
    pass


# archive / checkpoint codec errors


class ArchiveVersionError(DataError):
    pass


class TruncatedBlobError(DataError):
    pass


class ManifestInconsistencyError(DataError):
    pass


class NotACheckpointError(DataError):
    pass


class CheckpointVersionError(DataError):
    pass


class PayloadLengthError(DataError):
    pass


class ShapeManifestError(DataError):
    pass
