"""Exception taxonomy shared by the pipeline stages.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class HetmileError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HetmileError):
    """Invalid or inconsistent configuration (bad flag, missing file path)."""

    exit_code = 2


class DataError(HetmileError):
    """Malformed input data (bad TSV row, type contradiction, truncated blob)."""

    exit_code = 3


class NumericError(HetmileError):
    """Numeric failure during training (NaN loss, divergence)."""

    exit_code = 4
