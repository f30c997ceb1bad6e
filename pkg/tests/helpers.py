# featcal/tests/helpers.py
#
# Small model builders shared by the test modules.

from typing import List, Optional

import numpy as np

from core.layer_spec import ModelSpec
from core.model_engine import build_model
from core.parameters import ParameterSet, Role


def residual_spec(input_dim: int = 4, width: int = 6, out_dim: int = 5, classes: int = 3,
                  activation: str = "tanh") -> ModelSpec:
    """Linear -> act -> Residual[LN, Linear, act, Linear] -> LN -> Linear -> act, plus a head."""
    return ModelSpec.model_validate({
        "input_dim": input_dim,
        "layers": [
            {"kind": "linear", "in_dim": input_dim, "out_dim": width},
            {"kind": "activation", "function": activation},
            {"kind": "residual", "inner": [
                {"kind": "layernorm", "dim": width},
                {"kind": "linear", "in_dim": width, "out_dim": width},
                {"kind": "activation", "function": activation},
                {"kind": "linear", "in_dim": width, "out_dim": width},
            ]},
            {"kind": "layernorm", "dim": width},
            {"kind": "linear", "in_dim": width, "out_dim": out_dim},
            {"kind": "activation", "function": activation},
        ],
        "head": {"kind": "linear", "in_dim": out_dim, "out_dim": classes},
    })


def linear_spec(dims: List[int], classes: Optional[int] = None) -> ModelSpec:
    layers = [{"kind": "linear", "in_dim": a, "out_dim": b} for a, b in zip(dims[:-1], dims[1:])]
    head = {"kind": "linear", "in_dim": dims[-1], "out_dim": classes} if classes else None
    return ModelSpec.model_validate({"input_dim": dims[0], "layers": layers, "head": head})


def residual_stack_spec(width: int, blocks: int, activation: str = "tanh") -> ModelSpec:
    block = {"kind": "residual", "inner": [
        {"kind": "linear", "in_dim": width, "out_dim": width},
        {"kind": "activation", "function": activation},
        {"kind": "linear", "in_dim": width, "out_dim": width},
    ]}
    return ModelSpec.model_validate({"input_dim": width, "layers": [block] * blocks})


def perturbed(params: ParameterSet, scale: float, seed: int, role: Optional[Role] = None) -> ParameterSet:
    """Adds N(0, scale^2) noise to every entry."""
    rng = np.random.default_rng(seed)
    entries = {key: params[key] + scale * rng.standard_normal(params[key].shape) for key in params.keys()}
    return ParameterSet(role=role or params.role, entries=entries)


def random_model(spec: ModelSpec, seed: int, scale: float = 0.3) -> ParameterSet:
    """Initialised weights with non-trivial biases and LayerNorm affine."""
    return perturbed(build_model(spec, seed), scale, seed + 7919)


def expert_family(spec: ModelSpec, count: int, seed: int, spread: float = 0.2):
    """A base model and `count` experts scattered around it."""
    base = random_model(spec, seed)
    experts = [perturbed(base, spread, seed + 100 + i, Role.expert(i)) for i in range(count)]
    return base, experts


def random_batch(dim: int, columns: int, seed: int, scale: float = 1.0) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal((dim, columns))
