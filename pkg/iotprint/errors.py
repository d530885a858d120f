"""
Exception hierarchy for iotprint.

Every error subclasses a builtin so callers may catch either the domain type
or the familiar ValueError. The CLI maps ConfigError to exit code 1 and
DataError (and its subclasses) to exit code 2.
"""

from __future__ import annotations


class IotPrintError(Exception):
    """Root of all iotprint errors."""


class ConfigError(IotPrintError, ValueError):
    """Invalid configuration, flags, or hyperparameters."""


class DataError(IotPrintError, ValueError):
    """Input data that cannot be used (empty sets, degenerate splits, missing classes)."""


class FormatError(DataError):
    """Malformed file contents (pcap, IDX, JSON artifacts)."""


class UnsupportedFormatError(FormatError):
    """A recognized but unsupported container, e.g. pcapng."""


class ConsistencyError(FormatError):
    """Paired files that disagree with each other (IDX magic or count mismatch)."""


class TruncatedRecordError(FormatError):
    """A pcap record whose header or data runs past the end of the file."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"record {index}: {message}")
        self.index = index


class PreconditionError(IotPrintError, ValueError):
    """A caller violated an operation precondition."""


class ShapeError(IotPrintError, ValueError):
    """Array dimensions that do not match the model or dataset."""
