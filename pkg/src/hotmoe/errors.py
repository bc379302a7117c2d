"""Exception taxonomy shared across the package.

Each class maps to one CLI exit code (see cli.py), so raising the right
type is part of the operator contract, not just diagnostics.
"""


class HotmoeError(Exception):
    """Base class for all package errors."""


class ConfigError(HotmoeError):
    """Invalid configuration, arguments, or preconditions."""


class NumericalError(HotmoeError):
    """Non-finite values or divergence during computation."""


class InvariantViolation(HotmoeError):
    """A hard internal contract was broken (e.g. frozen weights changed)."""


class IoError(HotmoeError):
    """Filesystem read/write failure for run artifacts."""
