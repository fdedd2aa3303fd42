"""Exception hierarchy shared by all camgeo modules."""

from __future__ import annotations


class CamGeoError(ValueError):
    """Base class for all library errors."""


class OutOfDomainError(CamGeoError):
    """A point or pixel lies outside a camera model's valid domain."""


class DegenerateError(CamGeoError):
    """Input geometry is degenerate (rank deficiency, zero baseline, ...)."""


class ShapeError(CamGeoError):
    """Array shapes do not match."""


class FormatError(CamGeoError):
    """Malformed input file; carries the offending path and line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConvergenceError(CamGeoError):
    """An iterative solver stopped without meeting its tolerance."""
