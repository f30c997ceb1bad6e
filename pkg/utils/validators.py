# featcal/utils/validators.py

from typing import Any, Dict, Optional, Sequence, Type, TypeVar

import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError

from core.errors import NonFiniteError, ShapeMismatchError

M = TypeVar("M", bound=BaseModel)


def validate_dict_with_pydantic_model(data: Optional[Dict[str, Any]], model: Type[M]) -> M:
    """Validates a (possibly missing) config dict; logs and re-raises on failure."""
    try:
        return model.model_validate(data or {})
    except ValidationError as e:
        logger.error(f"Validation error for data against model {model.__name__}: {e}")
        raise


def ensure_finite(name: str, array: np.ndarray, layer_index: Optional[int] = None) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} has non-finite values", layer_index)
    return array


def ensure_shape(name: str, array: np.ndarray, expected: Sequence[int]) -> np.ndarray:
    if tuple(array.shape) != tuple(expected):
        raise ShapeMismatchError(name, tuple(expected), tuple(array.shape))
    return array
