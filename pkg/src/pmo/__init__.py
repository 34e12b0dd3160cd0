"""Persistent memory objects: a crash-consistent object store with psync."""

from . import errors
from ._kernels import BACKEND as KERNEL_BACKEND
from .errors import (AlreadyExistsError, BusyError, CapacityError, ConfigError, DomainError,
                     FormatError, NotFormattedError, NotFoundError, OutOfSpaceError, PermissionError,
                     PmoError, RangeError, ScriptError, UndefinedBehaviorError)
from .layout import (MetadataEntry, SystemHeader, Volume, format_device, inspect_lines,
                     open_system, parse_inspect)
from .pmem import (CrashImage, EventKind, LineAddr, MappedDevice, PersistenceModel, ProtocolEvent,
                   enumerate_crash_images)
from .store import AddressPolicy, Permission, PmoHandle, PmoSystem, RecoveryReport, SyncConfig

__version__ = "0.1.0"

__all__ = [
    "errors", "KERNEL_BACKEND",
    "AlreadyExistsError", "BusyError", "CapacityError", "ConfigError", "DomainError",
    "FormatError", "NotFormattedError", "NotFoundError", "OutOfSpaceError", "PermissionError",
    "PmoError", "RangeError", "ScriptError", "UndefinedBehaviorError",
    "MetadataEntry", "SystemHeader", "Volume", "format_device", "inspect_lines", "open_system",
    "parse_inspect",
    "CrashImage", "EventKind", "LineAddr", "MappedDevice", "PersistenceModel", "ProtocolEvent",
    "enumerate_crash_images",
    "AddressPolicy", "Permission", "PmoHandle", "PmoSystem", "RecoveryReport", "SyncConfig",
]
