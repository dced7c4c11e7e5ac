"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Matrix or vector shapes do not agree."""


class ValidationError(ValueError):
    """An input violates a documented invariant."""


class InstabilityError(ArithmeticError):
    """A closed-loop matrix is not Schur stable where stability is required."""


class SamplingError(ArithmeticError):
    """Consensus normalization in sphere sampling produced an unusable value."""


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or validated."""
