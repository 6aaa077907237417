class DmifError(Exception):
    """Base class for every error raised by the dmif package"""


class DimensionError(DmifError, ValueError):
    """Shape, channel count or size mismatch"""


class NonFiniteError(DmifError, FloatingPointError):
    """NaN or Inf produced in a forward or backward pass"""


class MissingGradientError(DmifError, KeyError):
    """An updatable parameter has no gradient"""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"Parameter '{self.name}' has no gradient"


class ConfigError(DmifError, ValueError):
    """Invalid configuration, override or variant name"""


class FormatError(DmifError, ValueError):
    """Unreadable binary file (bad magic, version or layout)"""


class TrainingDivergedError(DmifError, RuntimeError):
    """Loss became NaN or Inf during training"""

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class EmptyMeshError(DmifError, ValueError):
    """An operation needs a non-empty surface"""


class SamplingError(DmifError, RuntimeError):
    """Surface sampling could not produce the requested number of points"""
