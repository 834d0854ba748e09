"""Exception hierarchy shared by the simulator and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class AuxFLError(Exception):
    exit_code = 1


class ConfigError(AuxFLError):
    """Invalid configuration: bad shapes, unknown baselines, impossible plans."""

    exit_code = 2


class DataError(AuxFLError):
    """Malformed or missing input data."""

    exit_code = 3


class NumericalError(AuxFLError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message, round_index=None, station=None):
        super().__init__(message)
        self.round_index = round_index
        self.station = station
