"""Shared exception types.

Every failure mode named in the public contracts maps to one of these, so
callers can distinguish bad input (DomainError, EvanescentModeError, ...)
from numerical breakdown (CausticError, IllConditionedFitError, ...).
"""

from __future__ import annotations


class MxtomoError(Exception):
    """Base class for all package errors."""


class DomainError(MxtomoError):
    """Point lies outside the medium's extended box or the run domain."""


class EvanescentModeError(MxtomoError):
    """Tangential frequency too large: eps*mu - |xi'|^2 <= 0."""


class GrazingRayError(MxtomoError):
    """Launch direction within the grazing tolerance of tangency."""


class TrappedRayError(MxtomoError):
    """Ray did not leave the domain within its length budget."""


class CausticError(MxtomoError):
    """Spreading determinant hit zero (conjugate point) or the phase
    Hessian blew up along a characteristic."""


class InconsistentTraceError(MxtomoError):
    """Boundary trace violates an exact splitting identity."""


class DegenerateLevelError(MxtomoError):
    """grad kappa vanishes on a sampled foliation level set."""


class IllConditionedFitError(MxtomoError):
    """Boundary-symbol least squares is numerically singular."""


class InconsistentDataError(MxtomoError):
    """Fitted coefficients leave the physical range (e.g. mu^2 <= 0)."""


class HerglotzViolationError(MxtomoError):
    """Radial profile violates d/dr(r/c) > 0 (or data imply it)."""


class CoverageError(MxtomoError):
    """Acquisition left part of the reconstruction region unsampled."""


class AcquisitionError(MxtomoError):
    """Too many rays of a fan were rejected (grazing/trapped)."""


class DivergenceError(MxtomoError):
    """Iterative solve failed to decrease its objective."""


class ConfigError(MxtomoError):
    """Malformed run configuration or dataset metadata."""


class FormatError(MxtomoError):
    """Malformed MXT-FIELD file or CSV table."""
