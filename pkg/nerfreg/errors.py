"""
Domain Exceptions
Error types raised by the nerfreg library; the CLI maps them to exit codes.
"""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class EmptyMaskError(InvalidArgumentError):
    """A voxel mask selects no voxels, so the block cannot be registered."""


class FormatError(ValueError):
    """A binary file or checkpoint has the wrong magic, version or schema."""


class ManifestError(ValueError):
    """An experiment manifest is malformed or mixes train and test objects."""


class DegenerateConfigurationError(RuntimeError):
    """The weighted cross-covariance has rank < 2."""


class InsufficientCorrespondencesError(RuntimeError):
    """Fewer than three correspondences survive filtering."""


class NonFiniteLossError(RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(self, message: str, step: int = -1, parts=None):
        super().__init__(message)
        self.step = step
        self.parts = dict(parts or {})
