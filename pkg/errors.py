"""
errors.py
---------
Exception hierarchy shared by every module.
Library code raises these; cli.py maps them to exit codes.
"""

from typing import Optional


class HarmonyError(Exception):
    """Base class for all harmonizer errors."""


class DegenerateInputError(HarmonyError, ValueError):
    """Input has no usable spread (constant image, single-class labels)."""


class FormatError(HarmonyError, ValueError):
    """Malformed IMG1 container."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BoundaryError(HarmonyError, ValueError):
    """Style parameter at or outside its range; its latent would be infinite."""


class ContractError(HarmonyError, ValueError):
    """Arguments violate an operation's preconditions."""


class NumericalError(HarmonyError, ArithmeticError):
    """Factorization or optimization broke down numerically."""


class TrainingError(HarmonyError, RuntimeError):
    """Downstream model cannot be trained on the given dataset."""


class ConfigError(HarmonyError, ValueError):
    """Invalid run configuration or command line."""
