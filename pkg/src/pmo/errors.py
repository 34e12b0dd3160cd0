"""Exception taxonomy shared by every layer of the PMO store."""

import builtins


class PmoError(Exception):
    """Base class for all PMO errors."""


class RangeError(PmoError, IndexError):
    """Offset or length outside the addressed object, or misaligned."""


class DomainError(PmoError, ValueError):
    """Operation not allowed on the given region or in the current state."""


class FormatError(PmoError):
    pass


class NotFormattedError(PmoError):
    pass


class OutOfSpaceError(PmoError):
    pass


class CapacityError(OutOfSpaceError):
    """The metadata hashtable has no free slot."""


class AlreadyExistsError(PmoError):
    pass


class NotFoundError(PmoError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PermissionError(PmoError, builtins.PermissionError):
    """Key mismatch, or the requested access is not granted."""


class BusyError(PmoError):
    pass


class UndefinedBehaviorError(PmoError):
    """Raised by checked builds where the programming model leaves behavior undefined."""


class ConfigError(PmoError):
    pass


class ScriptError(PmoError):
    """Crash-test workload script failed to parse or is ill-formed."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno
