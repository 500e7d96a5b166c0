"""Exception taxonomy shared across the package.

Every error raised by fuselab derives from :class:`FuselabError` so callers can
catch the whole family.  Parse and validation problems carry enough context
(file, row, column name) to locate the offending input.
"""

from __future__ import annotations

__all__ = [
    "FuselabError",
    "ValidationError",
    "ParseError",
    "InsufficientDataError",
    "FitError",
    "IdentifiabilityError",
    "DegenerateBiasError",
    "DecompositionError",
    "DomainError",
    "MaskedVarianceError",
    "ConfigError",
]


class FuselabError(Exception):
    """Base class for all package errors."""


class ValidationError(FuselabError, ValueError):
    """Structurally invalid value (bad shape, bad index, broken invariant)."""


class ParseError(FuselabError, ValueError):
    """Malformed input file.  Carries the path and 1-based row number."""

    def __init__(self, message: str, *, path: str | None = None, row: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if row is not None:
            loc += f", row {row}"
        super().__init__(f"{message} ({loc})" if loc else message)
        self.path = path
        self.row = row


class InsufficientDataError(FuselabError, ValueError):
    """Not enough records to compute the requested quantity."""


class FitError(FuselabError, RuntimeError):
    """A model fit failed to converge or the data are degenerate."""


class IdentifiabilityError(FuselabError, ValueError):
    """A regression design is rank deficient."""

    def __init__(self, message: str, columns: list[int] | None = None):
        super().__init__(message)
        self.columns = columns or []


class DegenerateBiasError(FuselabError, ValueError):
    """The fitted bias vector is exactly zero, so no shrinkage weight is defined."""


class DecompositionError(FuselabError, ValueError):
    """A matrix decomposition failed (not SPD, eigenvalue below tolerance, ...)."""


class DomainError(FuselabError, ValueError):
    """A parameter is outside its mathematical domain."""


class MaskedVarianceError(FuselabError, ValueError):
    """A masked randomized-arm variance would be needed by the requested computation."""


class ConfigError(FuselabError, ValueError):
    """Bad configuration file or option value.  Names the offending key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{message} (key: {key})")
        self.key = key
