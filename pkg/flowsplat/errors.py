"""Exceptions raised by flowsplat."""

__all__ = [
    "BehindCameraError",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "FormatError",
    "NondeterminismError",
    "NonFiniteError",
    "StaleCandidatesError",
]


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A point lies at or behind the near plane of a camera."""


class ConfigError(ValueError):
    """Invalid configuration value, key or section."""


class FormatError(ValueError):
    """A file does not follow the expected format."""


class StaleCandidatesError(RuntimeError):
    """Candidates or masks were built for another cloud generation."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient contains NaN or infinite entries."""


class NondeterminismError(RuntimeError):
    """Two identical evaluations of a loss returned different values."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
