"""Exception taxonomy shared by the library and the CLI exit codes."""


class PolypSegError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ConfigError(PolypSegError, ValueError):
    exit_code = 2


class DataValidationError(PolypSegError, ValueError):
    exit_code = 3


class DatasetStructureError(DataValidationError):
    """Dataset root is missing the expected `images/` or `masks/` layout."""


class ArtifactIOError(PolypSegError, OSError):
    """A file could not be read, decoded or written."""

    exit_code = 5


class CheckpointError(ArtifactIOError):
    """Checkpoint archive is truncated, corrupt or fails its checksum."""


class ShapeError(PolypSegError, ValueError):
    pass


class NumericError(PolypSegError, ArithmeticError):
    """Non-finite loss or similar numeric breakdown during training."""


class TapLookupError(PolypSegError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown tap"


class CapabilityError(PolypSegError, RuntimeError):
    """The model cannot provide gradients required by the requested operation."""
