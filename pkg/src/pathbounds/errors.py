"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class PathBoundsError(Exception):
    exit_code = 1


class ConfigError(PathBoundsError):
    exit_code = 2


class DataError(PathBoundsError):
    """Invalid or degenerate input data (including malformed files)."""

    exit_code = 3


class DegenerateAxisError(DataError):
    pass


class NumericError(PathBoundsError):
    exit_code = 4


class BandwidthSelectionError(NumericError):
    pass


class FilterInfeasibleError(NumericError):
    """Rejection sampling could not find enough paths passing a shape filter."""

    def __init__(self, message, acceptance_rate=None):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class CapacityError(PathBoundsError):
    exit_code = 5


class OutputError(PathBoundsError):
    exit_code = 6
