"""Exception hierarchy shared across the workbench.

Exit codes used by the CLI: 1 configuration, 2 data, 3 numeric.
"""


class TransferBenchError(Exception):
    exit_code = 1


class ConfigurationError(TransferBenchError):
    """Bad or missing configuration (grids, paths, ratios, flags)."""

    exit_code = 1


class DataError(TransferBenchError):
    """Malformed or inconsistent data (labels, pixel ranges, missing artifacts)."""

    exit_code = 2


class FormatError(DataError):
    """Input does not match the expected image format (shape/channels)."""


class EvaluationError(DataError):
    """An evaluation cannot proceed, e.g. no teacher-correct inputs to attack."""


class FitError(DataError):
    """Degenerate input to a curve fit (e.g. all x values equal)."""


class NumericError(TransferBenchError):
    """Non-finite losses, gradients or activations."""

    exit_code = 3


class TrainingError(NumericError):
    """Training diverged; carries the epoch at which the loss went non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
