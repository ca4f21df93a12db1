"""
Every failure the simulator raises on purpose derives from FedTrackerError, so the
command line can map whole families of problems onto its exit codes.
"""


class FedTrackerError(Exception):
    pass


class ShapeMismatchError(FedTrackerError, ValueError):
    """A tensor, key or batch does not have the dimensions the operation needs."""


class LayoutMismatchError(FedTrackerError, ValueError):
    """Two parameter vectors (or models) were combined although their layouts differ."""


class LabelRangeError(FedTrackerError, ValueError):
    pass


class BatchSizeError(FedTrackerError, ValueError):
    """Batch statistics are undefined for a single-sample batch in train mode."""


class NonFiniteError(FedTrackerError, ArithmeticError):
    pass


class DataFormatError(FedTrackerError):
    """An IDX file or a checkpoint could not be parsed."""


class CheckpointError(DataFormatError):
    pass


class RecordsError(DataFormatError):
    """The fingerprint records on disk are missing, empty or inconsistent with their keys."""


class ConfigError(FedTrackerError):
    pass


class UnknownAttackError(ConfigError):

    def __init__(self, name: str, valid_names: list[str]):
        self.name = name
        self.valid_names = valid_names
        super().__init__(f"Unknown attack '{name}'. Valid attacks are: {', '.join(valid_names)}")
