"""Exception hierarchy shared across the package.

The command line maps each class to a stable exit code so shell pipelines
can distinguish bad configuration from bad data from a sampler that failed
its convergence gate.
"""

__all__ = [
    "ActimetsError",
    "ConfigError",
    "DataError",
    "DiagnosticError",
]


class ActimetsError(Exception):
    """Base class for all package errors."""


class ConfigError(ActimetsError):
    """Invalid or inconsistent run configuration.  CLI exit code 2."""

    exit_code = 2


class DataError(ActimetsError):
    """Malformed, missing, or stale input data.  CLI exit code 3."""

    exit_code = 3


class DiagnosticError(ActimetsError):
    """A sampler finished but failed its convergence gate.  CLI exit code 4."""

    exit_code = 4
