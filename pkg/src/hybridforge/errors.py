"""Exception types shared across the package."""


class HybridForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(HybridForgeError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(HybridForgeError):
    """Invalid model/task/pipeline configuration (CLI exit code 2)."""


class InputError(HybridForgeError):
    """Invalid runtime input, e.g. out-of-range token ids."""


class ContractError(HybridForgeError):
    """An internal precondition was violated (cache/model mismatch etc.)."""


class NumericError(HybridForgeError):
    """Non-finite values appeared during a numeric computation."""


class TrainingError(HybridForgeError):
    """Training aborted (non-finite loss or gradient)."""


class FormatError(HybridForgeError):
    """Malformed checkpoint container."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AssemblyError(HybridForgeError):
    """Hybrid assembly failed, e.g. missing distilled weights for a layer."""


class StageError(HybridForgeError):
    """A pipeline stage failed or a required upstream artifact is missing."""
