"""hybridforge: distill full-attention layers into linear ones, then search
for the hybrid layout that keeps task accuracy while shrinking decode state."""

__version__ = "0.1.0"

from .errors import (AssemblyError, ConfigError, ContractError, FormatError,
                     HybridForgeError, InputError, NumericError, ShapeError,
                     StageError, TrainingError)

__all__ = [
    "__version__",
    "AssemblyError", "ConfigError", "ContractError", "FormatError",
    "HybridForgeError", "InputError", "NumericError", "ShapeError",
    "StageError", "TrainingError",
]
