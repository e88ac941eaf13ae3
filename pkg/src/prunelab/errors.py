"""Failure types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericalFailure(RuntimeError):
    """A numerical routine could not produce a usable result."""
