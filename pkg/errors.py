"""
Error hierarchy shared by every module.

Library code raises these; only `main.py` turns them into exit codes:
  - ConfigError (and CheckpointError)  -> exit 1
  - NumericalError                      -> exit 2
  - DataFormatError                     -> exit 3
"""

from __future__ import annotations

from typing import Dict, Optional


class IbpLabError(Exception):
    """Base class for all errors raised by this project."""

    exit_code: int = 1


# -----------------------------
# Configuration
# -----------------------------
class ConfigError(IbpLabError, ValueError):
    """Invalid configuration document, override or field value."""

    exit_code = 1

    def __init__(self, message: str, *, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        elif field is not None:
            prefix = f"{field}: "
        super().__init__(prefix + message)


class CheckpointError(ConfigError):
    """Checkpoint cannot be read or was written by an incompatible version."""


# -----------------------------
# Numerics
# -----------------------------
class NumericalError(IbpLabError, ArithmeticError):
    exit_code = 2


class NonFiniteBoundError(NumericalError):
    """Interval bounds or ForwAbs gaps contain inf or NaN."""


class NonFiniteLossError(NumericalError):
    """Training loss became inf or NaN; carries where and what."""

    def __init__(self, batch_index: int, components: Dict[str, Optional[float]], epoch: Optional[int] = None):
        self.batch_index = batch_index
        self.epoch = epoch
        self.components = dict(components)
        parts = ", ".join(f"{k}={v}" for k, v in self.components.items())
        where = f"batch {batch_index}" if epoch is None else f"epoch {epoch} batch {batch_index}"
        super().__init__(f"non-finite loss at {where} ({parts})")


# -----------------------------
# Engine contracts
# -----------------------------
class ShapeError(IbpLabError, ValueError):
    pass


class DomainError(IbpLabError, ValueError):
    pass


class LabelError(IbpLabError, ValueError):
    pass


class TapeError(IbpLabError, RuntimeError):
    pass


# -----------------------------
# Data files
# -----------------------------
class DataFormatError(IbpLabError):
    exit_code = 3


class BadMagicError(DataFormatError):
    def __init__(self, path: str, found: int, expected: int, offset: int = 0):
        self.found = found
        self.expected = expected
        self.offset = offset
        super().__init__(
            f"{path}: bad magic 0x{found:08x} at offset {offset} (expected 0x{expected:08x})"
        )


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    def __init__(self, images: int, labels: int):
        self.images = images
        self.labels = labels
        super().__init__(f"image count {images} does not match label count {labels}")
