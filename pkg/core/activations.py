# featcal/core/activations.py

from typing import Callable, Dict, NamedTuple

import numpy as np
from loguru import logger


class Activation(NamedTuple):
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    smooth: bool


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return (x > 0.0).astype(np.float64)


def _tanh_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(x)
    return 1.0 - t * t


_REGISTRY: Dict[str, Activation] = {
    "tanh": Activation(np.tanh, _tanh_grad, True),
    "relu": Activation(_relu, _relu_grad, False),
    "identity": Activation(lambda x: x.copy(), np.ones_like, True),
}


def register_activation(name: str, fn: Callable, grad: Callable, smooth: bool = True) -> None:
    """Adds an elementwise activation usable from ActivationSpec.function."""
    if name in _REGISTRY:
        logger.warning(f"Activation '{name}' already registered. Replacing.")
    _REGISTRY[name] = Activation(fn, grad, smooth)
    logger.debug(f"Registered activation '{name}' (smooth={smooth})")


def get_activation(name: str) -> Activation:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown activation '{name}'; known: {sorted(_REGISTRY)}") from None


def is_registered(name: str) -> bool:
    return name in _REGISTRY
