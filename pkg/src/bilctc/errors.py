"""Exception hierarchy shared by every module.

The CLI maps each class to its own exit code, so keep them distinct.
"""


class BilctcError(Exception):
    exit_code = 1


class InvalidInputError(BilctcError, ValueError):
    """Malformed data handed to a pure operation (bad index, bad shape)."""

    exit_code = 4


class ConfigurationError(BilctcError, ValueError):
    """Inconsistent model, decode or run configuration."""

    exit_code = 3


class MissingFileError(BilctcError, FileNotFoundError):
    exit_code = 7


class InfeasibleTargetError(BilctcError, ValueError):
    """A CTC target cannot be emitted in the available number of frames."""

    exit_code = 5


class UsageError(BilctcError, RuntimeError):
    """An API was driven in an order it does not support."""

    exit_code = 1


class TrainingDivergedError(BilctcError, RuntimeError):
    exit_code = 6
