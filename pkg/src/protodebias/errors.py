"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config dataclass or config file holds an invalid combination of values."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its stated preconditions."""


class NumericError(ArithmeticError):
    """A computation produced NaN/inf or otherwise left the representable range."""


class ManifestError(ValueError):
    """A dataset manifest is malformed; the message names the offending line."""


class UsageError(ValueError):
    """Bad command-line usage (maps to exit code 2)."""
