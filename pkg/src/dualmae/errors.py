"""Exception hierarchy shared by every module."""

from __future__ import annotations


class DualMAEError(Exception):
    """Base class for all package errors."""


class ConfigError(DualMAEError, ValueError):
    """Invalid configuration value, shape request or policy."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ShapeError(DualMAEError, ValueError):
    """Array shapes that do not agree with each other."""


class InputError(DualMAEError, ValueError):
    """Input data violating an operation's precondition."""


class FormatError(DualMAEError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(DualMAEError, ArithmeticError):
    """Non-finite value detected; ``component`` names the offending quantity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite value in {component}: {value!r}")
        self.component = component
        self.value = value
