"""Exception types shared across the toolkit.

Every error carries a short machine-readable ``code`` and the process exit
status the CLI uses when it escapes a subcommand.
"""


class MSKDError(Exception):
    code = "error"
    exit_status = 1


class ShapeError(MSKDError, ValueError):
    code = "shape"
    exit_status = 2


class InvalidInputError(MSKDError, ValueError):
    code = "invalid-input"
    exit_status = 2


class ConfigError(MSKDError, ValueError):
    code = "config"
    exit_status = 2


class ConfigMismatchError(ConfigError):
    code = "config-mismatch"


class DataError(MSKDError):
    code = "data"
    exit_status = 3


class SamplingError(DataError):
    code = "sampling"


class TrainingError(MSKDError, RuntimeError):
    code = "training"
    exit_status = 4


class CorruptCheckpointError(MSKDError):
    code = "corrupt-checkpoint"
    exit_status = 5

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
