"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit code.
"""


class TisvError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(TisvError, ValueError):
    """Invalid configuration, shape mismatch, or infeasible setup."""

    exit_code = 2


class ContractError(TisvError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class InputTooShortError(ContractError):
    pass


class DegenerateEmbeddingError(TisvError, ArithmeticError):
    """A vector's norm is too small to normalize or score."""

    exit_code = 3


class DegenerateModelError(DegenerateEmbeddingError):
    pass


class UninitializedStatisticsError(TisvError, RuntimeError):
    """Inference-mode batch norm requested before any training update."""

    exit_code = 2


class DataError(TisvError, IOError):
    """Unreadable, malformed, or out-of-bounds audio/manifest data."""

    exit_code = 3


class UnsupportedFormatError(DataError):
    pass


class SplitError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TrainingDivergedError(TisvError, FloatingPointError):
    """Non-finite loss or gradient during training."""

    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
