# featcal/merging/mergers.py
#
# Weight-space mergers. Every entry (weights, biases, LayerNorm affine and the
# head) is merged by the same rule.

from typing import Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.errors import MergeError
from core.parameters import ParameterSet, Role

MergeFn = Callable[..., ParameterSet]
MERGE_METHODS: Dict[str, MergeFn] = {}


class MergeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Literal["average", "task-arithmetic"] = "task-arithmetic"
    scale: float = 0.3
    head_mode: Literal["task", "merged"] = "task"


def register_merger(name: str) -> Callable[[MergeFn], MergeFn]:
    def decorator(fn: MergeFn) -> MergeFn:
        if name in MERGE_METHODS:
            logger.warning(f"Merge method '{name}' already registered. Replacing.")
        MERGE_METHODS[name] = fn
        return fn
    return decorator


def _check_compatible(reference: ParameterSet, others: Sequence[ParameterSet]) -> None:
    for other in others:
        if set(other.keys()) != set(reference.keys()):
            diff = sorted(set(other.keys()) ^ set(reference.keys()))
            raise MergeError(f"{other.role} does not share entries with {reference.role}: {diff}")
        for key in reference.keys():
            if other[key].shape != reference[key].shape:
                raise MergeError(
                    f"shape mismatch at '{key}': {reference.role} has {reference[key].shape}, "
                    f"{other.role} has {other[key].shape}"
                )


def task_vector(base: ParameterSet, expert: ParameterSet) -> Dict[str, np.ndarray]:
    """W_i - W_base for every entry."""
    _check_compatible(base, [expert])
    return {key: expert[key] - base[key] for key in base.keys()}


@register_merger("average")
def simple_average(experts: Sequence[ParameterSet], **_) -> ParameterSet:
    if not experts:
        raise MergeError("simple averaging needs at least one expert")
    _check_compatible(experts[0], experts[1:])
    averaged = {
        key: np.stack([expert[key] for expert in experts], axis=0).mean(axis=0)
        for key in experts[0].keys()
    }
    logger.info(f"Simple-averaged {len(experts)} experts")
    return ParameterSet(role=Role.merged(), entries=averaged)


@register_merger("task-arithmetic")
def task_arithmetic(base: ParameterSet, experts: Sequence[ParameterSet], scale: float = 0.3, **_) -> ParameterSet:
    """W_mer = W_base + scale * sum_i (W_i - W_base)."""
    if base is None:
        raise MergeError("task arithmetic needs the base model")
    if not experts:
        raise MergeError("task arithmetic needs at least one expert")
    _check_compatible(base, experts)
    summed: Dict[str, np.ndarray] = {key: np.zeros_like(base[key]) for key in base.keys()}
    for expert in experts:
        for key, delta in task_vector(base, expert).items():
            summed[key] += delta
    merged = {key: base[key] + scale * summed[key] for key in base.keys()}
    logger.info(f"Task arithmetic over {len(experts)} experts (scale={scale})")
    return ParameterSet(role=Role.merged(), entries=merged)


def merge(
    method: str,
    experts: Sequence[ParameterSet],
    base: Optional[ParameterSet] = None,
    scale: float = 0.3,
) -> ParameterSet:
    try:
        fn = MERGE_METHODS[method]
    except KeyError:
        raise MergeError(f"unknown merge method '{method}'; known: {sorted(MERGE_METHODS)}") from None
    if method == "average":
        return fn(experts)
    return fn(base=base, experts=experts, scale=scale)


def with_task_head(params: ParameterSet, expert: ParameterSet, prefix: str = "head.") -> ParameterSet:
    """Copies the expert's head entries into `params` so it scores the expert's task."""
    updates = {key: expert[key] for key in expert.keys() if key.startswith(prefix)}
    if not updates:
        raise MergeError(f"{expert.role} has no '{prefix}' entries")
    return params.replace(updates)


def task_vector_cosine(model: ParameterSet, base: ParameterSet, expert: ParameterSet, prefix: str = "layers.") -> float:
    """Cosine between the flattened backbone task vectors of `model` and `expert`."""
    keys: List[str] = sorted(key for key in base.keys() if key.startswith(prefix))
    a = np.concatenate([(model[k] - base[k]).ravel() for k in keys])
    b = np.concatenate([(expert[k] - base[k]).ravel() for k in keys])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))
