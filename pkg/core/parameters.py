# featcal/core/parameters.py

from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from core.errors import NonFiniteError, ShapeMismatchError, SpecError
from core.layer_spec import LayerNormSpec, LinearSpec, ModelSpec


class RoleKind(str, Enum):
    BASE = "base"
    EXPERT = "expert"
    MERGED = "merged"
    CALIBRATED = "calibrated"


class Role(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: RoleKind
    task_index: Optional[int] = None

    @model_validator(mode="after")
    def _expert_needs_task(self):
        if (self.kind == RoleKind.EXPERT) != (self.task_index is not None):
            raise ValueError("task_index is required for experts and only for experts")
        return self

    @classmethod
    def base(cls) -> "Role":
        return cls(kind=RoleKind.BASE)

    @classmethod
    def expert(cls, task_index: int) -> "Role":
        return cls(kind=RoleKind.EXPERT, task_index=task_index)

    @classmethod
    def merged(cls) -> "Role":
        return cls(kind=RoleKind.MERGED)

    @classmethod
    def calibrated(cls) -> "Role":
        return cls(kind=RoleKind.CALIBRATED)

    def __str__(self) -> str:
        return f"expert-{self.task_index}" if self.kind == RoleKind.EXPERT else self.kind.value


def _frozen_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def expected_entries(spec: ModelSpec, include_head: bool = True) -> Dict[str, Tuple[int, ...]]:
    """Entry key -> shape for every parameter a model with this spec owns."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for ref in spec.modules(include_head=include_head):
        if isinstance(ref.spec, LinearSpec):
            shapes[f"{ref.path}.weight"] = (ref.spec.out_dim, ref.spec.in_dim)
            if ref.spec.has_bias:
                shapes[f"{ref.path}.bias"] = (ref.spec.out_dim,)
        elif isinstance(ref.spec, LayerNormSpec):
            shapes[f"{ref.path}.gamma"] = (ref.spec.dim,)
            shapes[f"{ref.path}.beta"] = (ref.spec.dim,)
    return shapes


class ParameterSet(BaseModel):
    """All named parameters of one model role. Arrays are read-only."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    role: Role
    entries: Dict[str, np.ndarray]

    @field_validator("entries", mode="before")
    @classmethod
    def _freeze(cls, value: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        frozen = {}
        for key in sorted(value):
            arr = _frozen_array(value[key])
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"parameter '{key}' has non-finite values")
            frozen[key] = arr
        return frozen

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def keys(self) -> List[str]:
        return list(self.entries)

    def module_entries(self, path: str) -> Dict[str, np.ndarray]:
        prefix = f"{path}."
        return {k[len(prefix):]: v for k, v in self.entries.items() if k.startswith(prefix)}

    def replace(self, updates: Mapping[str, np.ndarray], role: Optional[Role] = None) -> "ParameterSet":
        for key, value in updates.items():
            if key not in self.entries:
                raise KeyError(f"unknown parameter entry '{key}'")
            if np.shape(value) != self.entries[key].shape:
                raise ShapeMismatchError(f"update for '{key}'", self.entries[key].shape, np.shape(value))
        merged = dict(self.entries)
        merged.update(updates)
        return ParameterSet(role=role or self.role, entries=merged)

    def with_role(self, role: Role) -> "ParameterSet":
        return ParameterSet(role=role, entries=self.entries)

    def check_against(self, spec: ModelSpec) -> None:
        shapes = expected_entries(spec)
        missing = sorted(set(shapes) - set(self.entries))
        extra = sorted(set(self.entries) - set(shapes))
        if missing or extra:
            raise SpecError(f"parameter set does not match spec (missing={missing}, extra={extra})")
        for key, shape in shapes.items():
            if self.entries[key].shape != shape:
                raise ShapeMismatchError(f"entry '{key}'", shape, self.entries[key].shape)

    def same_values(self, other: "ParameterSet", keys: Optional[Iterable[str]] = None) -> bool:
        keys = list(keys) if keys is not None else self.keys()
        return all(np.array_equal(self.entries[k], other.entries[k]) for k in keys)


class FeatureTrace(BaseModel):
    """per_layer[0] is the input batch, per_layer[l] the output of layer l (d_l x M)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    per_layer: List[np.ndarray]
    head_scores: Optional[np.ndarray] = None

    @field_validator("per_layer", mode="before")
    @classmethod
    def _freeze_layers(cls, value) -> List[np.ndarray]:
        layers = [_frozen_array(v) for v in value]
        if layers and len({arr.shape[1] for arr in layers}) != 1:
            raise ShapeMismatchError("column count varies across layers")
        return layers

    @field_validator("head_scores", mode="before")
    @classmethod
    def _freeze_scores(cls, value):
        return None if value is None else _frozen_array(value)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer) - 1

    @property
    def num_columns(self) -> int:
        return self.per_layer[0].shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.per_layer[-1]
