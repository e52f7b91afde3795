"""
errors.py — Exception hierarchy shared by every minihes module.

All library errors derive from MiniHesError so the CLI can map them to exit
codes in one place. Most also derive from the matching builtin so callers
that only know ``ValueError`` / ``RuntimeError`` keep working.
"""

from __future__ import annotations

from typing import Optional


class MiniHesError(Exception):
    """Root of the minihes exception hierarchy."""


class ConfigError(MiniHesError, ValueError):
    """Invalid configuration, ratios, sizes or CLI arguments."""


class DatasetParseError(MiniHesError, ValueError):
    """A rating file could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class NonFiniteError(MiniHesError, ArithmeticError):
    """A loss, gradient or CG quantity became NaN/inf."""

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        entity: Optional[int] = None,
    ):
        self.detail = message
        self.epoch = epoch
        self.entity = entity
        parts = []
        if epoch is not None:
            parts.append(f"epoch {epoch}")
        if entity is not None:
            parts.append(f"entity {entity}")
        prefix = f"[{', '.join(parts)}] " if parts else ""
        super().__init__(prefix + message)


class BlockTaskError(MiniHesError, RuntimeError):
    """A worker failed while processing an entity block."""

    def __init__(self, entity: int, cause: BaseException):
        self.entity = entity
        self.cause = cause
        super().__init__(f"block task failed at entity {entity}: {cause}")


class OracleCapExceeded(MiniHesError, ValueError):
    """A dense oracle was asked to build a matrix above the size cap."""


class ThreadMismatchError(MiniHesError, RuntimeError):
    """Runs with different thread counts produced different outputs."""


__all__ = [
    "MiniHesError",
    "ConfigError",
    "DatasetParseError",
    "NonFiniteError",
    "BlockTaskError",
    "OracleCapExceeded",
    "ThreadMismatchError",
]
