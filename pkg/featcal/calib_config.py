# featcal/featcal/calib_config.py

from fnmatch import fnmatchcase
from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, field_validator


class CalibConfig(BaseModel):
    """Hyperparameters of one calibration run. `lambda` is accepted as an alias of `lam`."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: NonNegativeFloat = Field(0.05, alias="lambda")
    rho: float = 2.0
    alpha: float = 0.3
    epsilon: PositiveFloat = 1e-8
    n: PositiveInt = 256
    calibrate_bias: bool = True
    calibrate_layernorm: bool = True
    modules: List[str] = Field(default_factory=lambda: ["*"])
    feature_source: Literal["deployed", "merged", "expert"] = "deployed"
    task_weighting: Literal["inverse_norm", "uniform"] = "inverse_norm"

    @field_validator("alpha")
    @classmethod
    def _alpha_in_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {value}")
        return value

    @field_validator("modules", mode="before")
    @classmethod
    def _split_globs(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    def selects(self, module_path: str) -> bool:
        return any(fnmatchcase(module_path, pattern) for pattern in self.modules)
