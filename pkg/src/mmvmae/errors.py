"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4).
"""


class ConfigurationError(ValueError):
    """A config value is missing, malformed, or inconsistent."""


class ValidationError(ValueError):
    """Input data violates a structural invariant (shapes, labels, names)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or diverged."""
