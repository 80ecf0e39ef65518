"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
OracleError -> 3, NumericError -> 4.
"""


class LdarError(Exception):
    pass


class UsageError(LdarError):
    """Caller misuse: bad arguments, bad flags, preconditions violated."""


class DataError(LdarError):
    """Malformed dataset, record, or on-disk artifact."""


class CheckpointFormatError(DataError):
    """Checkpoint file corrupt, truncated, or from an incompatible build."""


class OracleError(LdarError):
    """External answering oracle failed: timeout, crash, nonzero exit."""


class ProtocolError(OracleError):
    """Oracle replied, but the response violates the wire protocol."""


class NumericError(LdarError):
    """Non-finite value encountered where the math guarantees finiteness."""
