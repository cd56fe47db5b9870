"""Exception hierarchy shared across the pipeline.

Every error raised on purpose by this package derives from
:class:`FedGraphError`; the CLI maps the three branches below onto exit codes.
"""

from __future__ import annotations


class FedGraphError(Exception):
    """Base class for all package errors."""


class ConfigError(FedGraphError, ValueError):
    """Invalid configuration or invalid call parameters."""


class DataError(FedGraphError, ValueError):
    """Input data is malformed, non-finite or degenerate."""


class ShapeError(DataError):
    """Array dimensions do not agree with what an operation requires."""


class InvalidInputError(DataError):
    """A value is outside the domain an operation accepts."""


class ContainerError(DataError):
    """A binary or text container could not be parsed."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class NonFiniteError(DataError):
    """A NaN or Inf was found. ``channel``/``epoch`` locate it when known."""

    def __init__(self, message: str, channel: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.channel = channel
        self.epoch = epoch


class DegenerateGeometryError(DataError):
    pass


class DegenerateRowError(DataError):
    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


class InvalidLabelError(DataError):
    pass


class RuntimeFailure(FedGraphError, RuntimeError):
    """Internal state violation detected at run time (e.g. a stale cache)."""
