"""Exception hierarchy. Each class carries the CLI exit code and a short error code."""


class SatError(Exception):
    exit_code = 1
    code = "E_INTERNAL"


class UsageError(SatError):
    exit_code = 2
    code = "E_USAGE"


class DimensionError(UsageError, ValueError):
    code = "E_DIMENSION"


class ConfigError(UsageError):
    code = "E_CONFIG"


class DataError(SatError, ValueError):
    exit_code = 3
    code = "E_DATA"


class SamplingError(DataError):
    code = "E_SAMPLING"


class AggregationError(DataError):
    code = "E_AGGREGATION"


class CapacityError(SatError):
    exit_code = 4
    code = "E_CAPACITY"


class AdaptationDeclined(UserWarning):
    """Emitted when adaptation is skipped because no adaptation frames remain."""
