"""Exception types shared across the package."""


class GctError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class ShapeError(GctError, ValueError):
    pass


class AxisError(GctError, IndexError):
    pass


class OptimizerError(GctError):
    pass


class FormatError(GctError):
    pass


class IngestError(GctError):
    pass


class ConfigError(GctError, ValueError):
    pass


class GraphError(GctError, ValueError):
    pass


class InputError(GctError, ValueError):
    pass


class TrainError(GctError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
