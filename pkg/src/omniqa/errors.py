"""Exception types shared across the package.

Each carries a machine-readable ``code`` used by the CLI's diagnostics stream.
"""


class OmniQAError(Exception):
    code = "error"
    exit_status = 1


class ConfigError(OmniQAError, ValueError):
    code = "config"
    exit_status = 1


class DataError(OmniQAError, ValueError):
    code = "data"
    exit_status = 2


class CheckpointError(OmniQAError, RuntimeError):
    code = "checkpoint"
    exit_status = 2


class NumericalError(OmniQAError, ArithmeticError):
    code = "numerical"
    exit_status = 3


class FitError(NumericalError):
    """Logistic fit failed to converge; ``params`` holds the best attempt."""

    code = "fit"

    def __init__(self, msg, params=None, rmse=None):
        super().__init__(msg)
        self.params = params
        self.rmse = rmse
