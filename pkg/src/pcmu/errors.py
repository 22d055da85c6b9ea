"""Exception hierarchy shared across the package."""


class PcmuError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PcmuError):
    """Invalid configuration value or unknown configuration key."""


class DataError(PcmuError):
    """Malformed input data, file, or checkpoint."""


class ContractViolation(PcmuError):
    """An operation was called outside its stated preconditions."""
