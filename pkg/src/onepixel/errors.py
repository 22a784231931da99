"""Exception hierarchy shared by every module."""

from __future__ import annotations


class OnePixelError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(OnePixelError, ValueError):
    """Array dimensions are incompatible with the requested operation."""


class ConfigError(OnePixelError, ValueError):
    """A model manifest, layer or attack configuration is invalid."""


class ParameterError(OnePixelError, ValueError):
    """A numeric argument is outside its allowed domain."""


class FormatError(OnePixelError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte offset (or record index, for record-oriented
    formats) at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
