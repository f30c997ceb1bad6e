# featcal/core/errors.py

from typing import Optional


class FeatCalError(Exception):
    """Base class for every error raised by the toolkit."""


class SpecError(FeatCalError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        where = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(f"{where}{message}")


class ShapeMismatchError(FeatCalError):
    def __init__(self, message: str, expected=None, actual=None):
        self.expected = expected
        self.actual = actual
        detail = f" (expected {expected}, got {actual})" if expected is not None else ""
        super().__init__(f"{message}{detail}")


class NonFiniteError(FeatCalError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        where = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(f"{where}{message}")


class MergeError(FeatCalError):
    pass


class TrainingDivergedError(FeatCalError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class CalibrationError(FeatCalError):
    def __init__(self, message: str, module_path: Optional[str] = None):
        self.module_path = module_path
        where = f"{module_path}: " if module_path else ""
        super().__init__(f"{where}{message}")


class OracleFailure(FeatCalError):
    pass


class ArtifactError(FeatCalError):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        where = f" [{path}]" if path else ""
        super().__init__(f"{message}{where}")


class ManifestError(FeatCalError):
    pass


class ConfigError(FeatCalError):
    pass


class StageError(FeatCalError):
    """A pipeline stage failed; `cause` is the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
