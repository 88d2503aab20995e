"""Exception hierarchy shared by every saqlab module."""

from typing import Optional


class SaqlabError(Exception):
    """Base class for all errors raised by saqlab."""


class TensorError(SaqlabError):
    """Errors raised by the autodiff core."""


class DimensionError(TensorError, ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractError(TensorError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(TensorError, FloatingPointError):
    """A committed tensor contains NaN or Inf while strict mode is on."""


class LabelIndexError(SaqlabError, IndexError):
    """A class label lies outside [0, K)."""


class QuantizationError(SaqlabError, ValueError):
    """Invalid quantizer parameter (clipping level or bitwidth)."""


class ModelBuildError(SaqlabError, ValueError):
    """A ModelSpec cannot be turned into a model."""


class ModelConfigError(SaqlabError, ValueError):
    """A forward pass was requested with a configuration the model cannot serve."""


class CostModelError(SaqlabError, ValueError):
    """Cost accounting was asked for an unsupported layer or config."""


class InfeasibleBudgetError(SaqlabError):
    """No sampled bitwidth configuration satisfied the BOP budget."""

    def __init__(self, budget: float, attempts: int) -> None:
        super().__init__(
            f"no configuration with cost <= {budget:g} found in {attempts} samples"
        )
        self.budget = budget
        self.attempts = attempts


class DataFormatError(SaqlabError, ValueError):
    """Malformed dataset file or unknown dataset kind."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataConsistencyError(SaqlabError, ValueError):
    """Two dataset files disagree with each other."""


class DataIOError(SaqlabError, OSError):
    """A dataset file ended before its header said it would."""


class ConfigError(SaqlabError, ValueError):
    """Invalid or unknown run configuration."""


class CheckpointError(SaqlabError, ValueError):
    """A checkpoint container cannot be read back."""
