# featcal/tasks/trainer.py
#
# Plain (optionally momentum) gradient descent with hand-written backprop for
# the four layer kinds plus the linear head and cross-entropy loss.

import asyncio
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, NonNegativeInt, PositiveInt

from core.activations import get_activation
from core.errors import NonFiniteError, ShapeMismatchError, SpecError, TrainingDivergedError
from core.layer_spec import (
    ActivationSpec,
    LayerNormSpec,
    LinearSpec,
    ModelSpec,
    ResidualBlockSpec,
    module_path,
)
from core.losses import cross_entropy, cross_entropy_grad, top1
from core.model_engine import apply_module, forward_trace
from core.parameters import ParameterSet, Role
from tasks.task_suite import TaskDataset
from utils.helpers import async_run_blocking


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: NonNegativeInt = 200
    lr: NonNegativeFloat = 0.1
    momentum: NonNegativeFloat = 0.0
    batch_size: NonNegativeInt = 0  # 0 = full batch
    seed: int = 0
    log_every: PositiveInt = 50


class EvalResult(BaseModel):
    accuracy: float
    mean_loss: float


def _stack(data: Union[TaskDataset, Sequence[TaskDataset]]) -> Tuple[np.ndarray, np.ndarray]:
    datasets = [data] if isinstance(data, TaskDataset) else list(data)
    if not datasets or sum(d.num_samples for d in datasets) == 0:
        raise ValueError("training data is empty")
    features = np.concatenate([d.features for d in datasets], axis=1)
    labels = np.concatenate([d.labels for d in datasets])
    return features, labels


def _module_forward(params: ParameterSet, path: Optional[str], spec, x: np.ndarray, caches: List) -> np.ndarray:
    caches.append((path, spec, x))
    return apply_module(params, path, spec, x)


def _module_backward(params: ParameterSet, path, spec, x: np.ndarray, dout: np.ndarray, grads: Dict) -> np.ndarray:
    if isinstance(spec, LinearSpec):
        grads[f"{path}.weight"] += dout @ x.T
        if spec.has_bias:
            grads[f"{path}.bias"] += dout.sum(axis=1)
        return params[f"{path}.weight"].T @ dout
    if isinstance(spec, LayerNormSpec):
        d = x.shape[0]
        centered = x - x.mean(axis=0, keepdims=True)
        sigma = np.sqrt(np.mean(centered * centered, axis=0, keepdims=True) + spec.eps)
        z = centered / sigma
        grads[f"{path}.gamma"] += (dout * z).sum(axis=1)
        grads[f"{path}.beta"] += dout.sum(axis=1)
        dz = dout * params[f"{path}.gamma"][:, None]
        return (d * dz - dz.sum(axis=0, keepdims=True) - z * (dz * z).sum(axis=0, keepdims=True)) / (d * sigma)
    if isinstance(spec, ActivationSpec):
        return dout * get_activation(spec.function).grad(x)
    raise SpecError(f"no backward rule for {type(spec).__name__}")


def loss_and_gradients(params: ParameterSet, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy through the head and its analytic gradient."""
    if spec.head is None:
        raise SpecError("training needs a classification head")
    if X.shape[0] != spec.input_dim:
        raise ShapeMismatchError("training features rows", spec.input_dim, X.shape[0])
    M = X.shape[1]
    layer_caches: List[Tuple] = []
    h = X
    for index, layer in enumerate(spec.layers, start=1):
        if isinstance(layer, ResidualBlockSpec):
            inner_caches: List = []
            g = h
            for j, inner in enumerate(layer.inner):
                g = _module_forward(params, module_path(index, inner, j), inner, g, inner_caches)
            layer_caches.append(("residual", inner_caches))
            h = h + g
        else:
            caches: List = []
            h = _module_forward(params, module_path(index, layer), layer, h, caches)
            layer_caches.append(("plain", caches))
    scores = apply_module(params, "head.linear", spec.head, h)
    loss = float(np.mean(cross_entropy(scores, y)))

    grads = {key: np.zeros_like(value) for key, value in params.entries.items()}
    dh = _module_backward(params, "head.linear", spec.head, h, cross_entropy_grad(scores, y) / M, grads)
    for kind, caches in reversed(layer_caches):
        if kind == "residual":
            dg = dh
            for path, sub, x in reversed(caches):
                dg = _module_backward(params, path, sub, x, dg, grads)
            dh = dh + dg
        else:
            path, sub, x = caches[0]
            dh = _module_backward(params, path, sub, x, dh, grads)
    return loss, grads


def train_model(
    start: ParameterSet,
    spec: ModelSpec,
    data: Union[TaskDataset, Sequence[TaskDataset]],
    config: TrainConfig,
    role: Optional[Role] = None,
) -> ParameterSet:
    X, y = _stack(data)
    rng = np.random.default_rng(config.seed)
    theta = {key: np.array(value) for key, value in start.entries.items()}
    velocity = {key: np.zeros_like(value) for key, value in theta.items()}
    M = X.shape[1]
    batch = config.batch_size or M
    loss = float("nan")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(M) if batch < M else np.arange(M)
        for lo in range(0, M, batch):
            idx = order[lo:lo + batch]
            try:
                current = ParameterSet(role=start.role, entries=theta)
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, loss) from e
            loss, grads = loss_and_gradients(current, spec, X[:, idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            for key in theta:
                velocity[key] = config.momentum * velocity[key] - config.lr * grads[key]
                theta[key] = theta[key] + velocity[key]
        if epoch % config.log_every == 0 or epoch == config.epochs:
            logger.debug(f"[{role or start.role}] epoch {epoch}/{config.epochs} loss={loss:.6f}")
    try:
        trained = ParameterSet(role=role or start.role, entries=theta)
    except NonFiniteError as e:
        raise TrainingDivergedError(config.epochs, loss) from e
    logger.info(f"Trained {trained.role} for {config.epochs} epochs on {M} samples (last batch loss {loss:.4f})")
    return trained


def evaluate(params: ParameterSet, spec: ModelSpec, data: Union[TaskDataset, Sequence[TaskDataset]]) -> EvalResult:
    X, y = _stack(data)
    scores = forward_trace(params, spec, X).head_scores
    if scores is None:
        raise SpecError("evaluation needs a classification head")
    accuracy = float(np.mean(top1(scores) == y))
    mean_loss = float(np.mean(cross_entropy(scores, y)))
    return EvalResult(accuracy=accuracy, mean_loss=mean_loss)


async def train_experts_concurrently(
    base: ParameterSet,
    spec: ModelSpec,
    train_sets: Sequence[TaskDataset],
    config: TrainConfig,
) -> List[ParameterSet]:
    """Fine-tunes one expert per task from the shared base, in worker threads."""
    run = async_run_blocking(train_model)
    jobs = [
        run(base, spec, dataset, config.model_copy(update={"seed": config.seed + dataset.task_index}),
            Role.expert(dataset.task_index))
        for dataset in train_sets
    ]
    logger.info(f"Fine-tuning {len(jobs)} experts concurrently")
    return list(await asyncio.gather(*jobs))
