"""Exception types shared across the package.

Plain invalid arguments raise ``ValueError``; everything that can fail for a
numerical or structural reason gets its own class so callers (and the CLI
exit-code mapping) can tell the cases apart.
"""

from __future__ import annotations


class SolverError(RuntimeError):
    """Fixed-point / bisection solver failed to converge.

    Carries the last residual seen so failures are diagnosable.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class AmbiguityError(RuntimeError):
    """Two independent solution routes disagree beyond tolerance."""


class ModelConstructionError(RuntimeError):
    """A covariance-model denominator or linear solve is degenerate."""


class ModelInconsistencyError(RuntimeError):
    """A matrix that must be positive semidefinite is not (surfaced, never
    silently repaired)."""


class NumericError(RuntimeError):
    """An overflow/underflow guard tripped during exact enumeration."""


class UnsupportedDegreeError(ValueError):
    """Monomial degree outside what the exact enumeration supports."""


class InvalidStateError(RuntimeError):
    """Operation requires retained state (e.g. configuration weights) that
    was not kept."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or inconsistent."""


class FitError(RuntimeError):
    """Least-squares design is singular or otherwise unusable."""
