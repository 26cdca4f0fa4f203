"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "HierMomentError",
    "ConvergenceError",
    "DegeneratePrecisionError",
    "DispersionError",
    "SingularOmegaError",
    "SingularOmega2Error",
    "ZeroRankError",
]


class HierMomentError(Exception):
    """Base class for numerical and identifiability failures."""


class ConvergenceError(HierMomentError):
    """Iterative fit did not converge; carries the last iterate as ``fit``."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class ZeroRankError(HierMomentError):
    """Group design matrix has numerical rank zero."""


class DegeneratePrecisionError(HierMomentError):
    """Plug-in precision matrix is numerically singular."""


class DispersionError(HierMomentError):
    """Dispersion unknown and no group has residual degrees of freedom."""


class SingularOmegaError(HierMomentError):
    """Fixed-effect Gram matrix is numerically singular.

    ``null_direction`` holds the offending near-null direction in coefficient
    space; a predictor combination along it is not identifiable from the data.
    """

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class SingularOmega2Error(HierMomentError):
    """Reduced symmetric-space Gram operator is numerically singular."""
