"""Exception types mapped to CLI exit codes (usage=1, data=2, numeric=3)."""


class ConfigError(Exception):
    """Invalid configuration or usage."""


class DataError(Exception):
    """Missing or malformed input data / stage artifacts."""


class NumericError(Exception):
    """Non-finite loss or other numeric failure during training."""
