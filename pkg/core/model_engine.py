# featcal/core/model_engine.py
#
# Layered network primitives. Feature matrices are column-per-sample (d x M),
# float64 throughout. Layer indices are 1-based; index 0 is the input.

from typing import List, Optional

import numpy as np
from loguru import logger

from core.activations import get_activation
from core.errors import NonFiniteError, ShapeMismatchError, SpecError
from core.layer_spec import (
    ActivationSpec,
    LayerNormSpec,
    LinearSpec,
    ModelSpec,
    ResidualBlockSpec,
    module_path,
)
from core.parameters import FeatureTrace, ParameterSet, Role


def build_model(spec: ModelSpec, seed: int) -> ParameterSet:
    """Seeded Base-role initialisation: U(-1/sqrt(in), 1/sqrt(in)) weights, zero
    biases, LayerNorm gamma = 1 and beta = 0."""
    spec.check()
    rng = np.random.default_rng(seed)
    entries = {}
    for ref in spec.modules(include_head=True):
        if isinstance(ref.spec, LinearSpec):
            bound = 1.0 / np.sqrt(ref.spec.in_dim)
            entries[f"{ref.path}.weight"] = rng.uniform(-bound, bound, size=(ref.spec.out_dim, ref.spec.in_dim))
            if ref.spec.has_bias:
                entries[f"{ref.path}.bias"] = np.zeros(ref.spec.out_dim)
        else:
            entries[f"{ref.path}.gamma"] = np.ones(ref.spec.dim)
            entries[f"{ref.path}.beta"] = np.zeros(ref.spec.dim)
    logger.debug(f"Built model with {len(entries)} parameter entries (seed={seed})")
    return ParameterSet(role=Role.base(), entries=entries)


def layernorm_normalize(x: np.ndarray, eps: float) -> np.ndarray:
    """LayerNorm without affine parameters, per column."""
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=0, keepdims=True)
    return centered / np.sqrt(var + eps)


def apply_module(params: ParameterSet, path: Optional[str], spec, x: np.ndarray) -> np.ndarray:
    """One Linear, LayerNorm or Activation map."""
    if isinstance(spec, LinearSpec):
        out = params[f"{path}.weight"] @ x
        if spec.has_bias:
            out = out + params[f"{path}.bias"][:, None]
        return out
    if isinstance(spec, LayerNormSpec):
        z = layernorm_normalize(x, spec.eps)
        return params[f"{path}.gamma"][:, None] * z + params[f"{path}.beta"][:, None]
    if isinstance(spec, ActivationSpec):
        return get_activation(spec.function).fn(x)
    raise SpecError(f"apply_module cannot handle {type(spec).__name__}")


def _in_dim(spec) -> Optional[int]:
    if isinstance(spec, LinearSpec):
        return spec.in_dim
    if isinstance(spec, LayerNormSpec):
        return spec.dim
    return None


def _check_input(spec, x: np.ndarray, layer_index: int) -> None:
    if x.ndim != 2:
        raise ShapeMismatchError(f"layer {layer_index} input must be a d x M matrix", 2, x.ndim)
    first = spec.inner[0] if isinstance(spec, ResidualBlockSpec) else spec
    expected = _in_dim(first)
    if expected is not None and x.shape[0] != expected:
        raise ShapeMismatchError(f"layer {layer_index} input rows", expected, x.shape[0])


def residual_branch(params: ParameterSet, spec: ModelSpec, layer_index: int, x: np.ndarray) -> np.ndarray:
    """g_l(h) of a ResidualBlock, i.e. the block output without the skip."""
    layer = spec.layer(layer_index)
    if not isinstance(layer, ResidualBlockSpec):
        raise SpecError("not a residual block", layer_index)
    out = np.asarray(x, dtype=np.float64)
    for j, inner in enumerate(layer.inner):
        out = apply_module(params, module_path(layer_index, inner, j), inner, out)
    return out


def apply_layer(params: ParameterSet, spec: ModelSpec, layer_index: int, x: np.ndarray) -> np.ndarray:
    layer = spec.layer(layer_index)
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x, layer_index)
    if isinstance(layer, ResidualBlockSpec):
        return x + residual_branch(params, spec, layer_index, x)
    return apply_module(params, module_path(layer_index, layer), layer, x)


def apply_head(params: ParameterSet, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    if spec.head is None:
        raise SpecError("model has no head")
    return apply_module(params, "head.linear", spec.head, features)


def forward_trace(params: ParameterSet, spec: ModelSpec, batch: np.ndarray) -> FeatureTrace:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] != spec.input_dim:
        raise ShapeMismatchError("input batch rows", spec.input_dim, batch.shape)
    per_layer: List[np.ndarray] = [batch]
    for index in range(1, spec.num_layers + 1):
        out = apply_layer(params, spec, index, per_layer[-1])
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite features", index)
        per_layer.append(out)
    scores = apply_head(params, spec, per_layer[-1]) if spec.head is not None else None
    return FeatureTrace(per_layer=per_layer, head_scores=scores)


def _module_jacobian(params: ParameterSet, path: Optional[str], spec, x: np.ndarray) -> np.ndarray:
    """Jacobian of one module at a single column x (shape (d,))."""
    if isinstance(spec, LinearSpec):
        return np.array(params[f"{path}.weight"])
    if isinstance(spec, LayerNormSpec):
        d = x.shape[0]
        centered = x - x.mean()
        sigma = np.sqrt(np.mean(centered * centered) + spec.eps)
        xhat = centered / sigma
        proj = np.eye(d) - np.full((d, d), 1.0 / d) - np.outer(xhat, xhat) / d
        return params[f"{path}.gamma"][:, None] * proj / sigma
    if isinstance(spec, ActivationSpec):
        return np.diag(get_activation(spec.function).grad(x))
    raise SpecError(f"no jacobian for {type(spec).__name__}")


def branch_jacobian(params: ParameterSet, spec: ModelSpec, layer_index: int, column: np.ndarray) -> np.ndarray:
    """Jacobian of the residual branch g_l at one column."""
    layer = spec.layer(layer_index)
    if not isinstance(layer, ResidualBlockSpec):
        raise SpecError("not a residual block", layer_index)
    x = np.asarray(column, dtype=np.float64).reshape(-1)
    jac = np.eye(x.shape[0])
    for j, inner in enumerate(layer.inner):
        path = module_path(layer_index, inner, j)
        jac = _module_jacobian(params, path, inner, x) @ jac
        x = apply_module(params, path, inner, x[:, None])[:, 0]
    return jac


def layer_jacobian(params: ParameterSet, spec: ModelSpec, layer_index: int, column: np.ndarray) -> np.ndarray:
    layer = spec.layer(layer_index)
    x = np.asarray(column, dtype=np.float64).reshape(-1)
    if isinstance(layer, ResidualBlockSpec):
        return np.eye(x.shape[0]) + branch_jacobian(params, spec, layer_index, x)
    return _module_jacobian(params, module_path(layer_index, layer), layer, x)


def activation_pattern(params: ParameterSet, spec: ModelSpec, layer_index: int, column: np.ndarray) -> np.ndarray:
    """Signs of the pre-activations of every non-smooth unit in the layer.

    Two points on a segment share one smooth piece when their patterns agree and
    contain no zeros.
    """
    layer = spec.layer(layer_index)
    x = np.asarray(column, dtype=np.float64).reshape(-1, 1)
    signs = []
    inner = layer.inner if isinstance(layer, ResidualBlockSpec) else [layer]
    for j, sub in enumerate(inner):
        if isinstance(sub, ActivationSpec) and not get_activation(sub.function).smooth:
            signs.append(np.sign(x[:, 0]))
        if isinstance(layer, ResidualBlockSpec):
            x = apply_module(params, module_path(layer_index, sub, j), sub, x)
    return np.concatenate(signs) if signs else np.zeros(0)


def layer_is_smooth(spec: ModelSpec, layer_index: int) -> bool:
    layer = spec.layer(layer_index)
    inner = layer.inner if isinstance(layer, ResidualBlockSpec) else [layer]
    return all(
        get_activation(sub.function).smooth for sub in inner if isinstance(sub, ActivationSpec)
    )


def layer_module_inputs(params: ParameterSet, spec: ModelSpec, layer_index: int, x: np.ndarray) -> dict:
    """Input feature matrix of every Linear/LayerNorm module inside one layer."""
    layer = spec.layer(layer_index)
    x = np.asarray(x, dtype=np.float64)
    if isinstance(layer, (LinearSpec, LayerNormSpec)):
        return {module_path(layer_index, layer): x}
    inputs = {}
    if isinstance(layer, ResidualBlockSpec):
        for j, inner in enumerate(layer.inner):
            path = module_path(layer_index, inner, j)
            if isinstance(inner, (LinearSpec, LayerNormSpec)):
                inputs[path] = x
            x = apply_module(params, path, inner, x)
    return inputs
