"""Exception types shared across the package.

Each error carries the process exit code the CLI reports for it.
"""


class LatentVidError(Exception):
    exit_code = 1


class ConfigError(LatentVidError, ValueError):
    exit_code = 2


class ShapeError(LatentVidError, ValueError):
    exit_code = 2


class NumericalFault(LatentVidError, FloatingPointError):
    exit_code = 3


class DegenerateLatentError(NumericalFault):
    pass


class IngestionError(LatentVidError, OSError):
    exit_code = 4


class CheckpointError(LatentVidError, OSError):
    exit_code = 4


class CheckpointIntegrityError(CheckpointError):
    """Payload hash does not match the manifest."""
