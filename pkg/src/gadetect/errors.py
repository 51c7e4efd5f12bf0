"""Exception hierarchy. Each family maps onto one CLI exit code."""


class GadetectError(Exception):
    exit_code = 1


class ConfigError(GadetectError, ValueError):
    exit_code = 2


class DataError(GadetectError, ValueError):
    exit_code = 3


class ManifestSchemaError(DataError):
    pass


class ManifestParseError(DataError):
    pass


class DuplicateRecordError(DataError):
    pass


class JoinError(DataError):
    pass


class TrainingError(GadetectError):
    exit_code = 4


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class InputError(GadetectError, ValueError):
    """Bad arguments to a pure function (shape, length, fingerprint)."""

    exit_code = 3


class StorageError(GadetectError, OSError):
    exit_code = 5
