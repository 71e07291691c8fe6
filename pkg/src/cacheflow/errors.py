"""Exception types shared across the package."""


class CacheFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(CacheFlowError, ValueError):
    """Array shapes do not match what an operation expects."""


class StateError(CacheFlowError, RuntimeError):
    """An object is used in the wrong lifecycle state."""


class NumericError(CacheFlowError, FloatingPointError):
    """A non-finite value was produced."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FingerprintMismatch(CacheFlowError):
    """A cache was built by a different flow than the one querying it."""

    def __init__(self, expected, found):
        super().__init__(
            f"cache fingerprint {found} does not match model fingerprint {expected}"
        )
        self.expected = expected
        self.found = found


class FormatError(CacheFlowError, ValueError):
    """A binary file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RankError(CacheFlowError, ValueError):
    """Data does not span enough directions for the requested codec size."""

    def __init__(self, requested, achievable):
        super().__init__(
            f"requested {requested} components but data has rank {achievable}"
        )
        self.requested = requested
        self.achievable = achievable
