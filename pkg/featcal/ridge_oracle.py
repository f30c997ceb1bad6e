# featcal/featcal/ridge_oracle.py
#
# Iterative minimiser of the module objective, independent of the normal
# equations. Used only to certify the closed-form weight solve.

from typing import Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.errors import OracleFailure


class OracleResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    W: np.ndarray
    objective: float
    grad_norm: float
    iterations: int


def _objective(W, X_cal, X_tgt, experts_W, omegas, lam, W_anc, epsilon) -> float:
    value = 0.0
    for X, T, W_i, omega in zip(X_cal, X_tgt, experts_W, omegas):
        R = W @ X - W_i @ T
        value += omega / X.shape[1] * float(np.sum(R * R))
    if W_anc is not None:
        value += lam * float(np.sum((W - W_anc) ** 2))
    return value + epsilon * float(np.sum(W * W))


def _gradient(W, X_cal, X_tgt, experts_W, omegas, lam, W_anc, epsilon) -> np.ndarray:
    grad = 2.0 * epsilon * W
    for X, T, W_i, omega in zip(X_cal, X_tgt, experts_W, omegas):
        grad += 2.0 * omega / X.shape[1] * (W @ X - W_i @ T) @ X.T
    if W_anc is not None:
        grad += 2.0 * lam * (W - W_anc)
    return grad


def ridge_oracle(
    X_cal: Sequence[np.ndarray],
    X_tgt: Sequence[np.ndarray],
    experts_W: Sequence[np.ndarray],
    omegas: Sequence[float],
    lam: float,
    W_anc: Optional[np.ndarray],
    epsilon: float = 0.0,
    W0: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    memory: int = 10,
) -> OracleResult:
    """Minimises sum_i (w_i/n_i)||W X_cal_i - W_i X_tgt_i||^2 + lam||W - W_anc||^2
    (+ eps||W||^2) by gradient descent.

    Steps are Barzilai-Borwein guesses checked by a non-monotone Armijo
    backtracking search over the last `memory` objective values.
    """
    args = (X_cal, X_tgt, experts_W, omegas, lam, W_anc, epsilon)
    shape = experts_W[0].shape if experts_W else W_anc.shape
    W = np.zeros(shape) if W0 is None else np.array(W0, dtype=np.float64)

    lipschitz = 2.0 * (sum(omega / X.shape[1] * np.linalg.norm(X, 2) ** 2 for X, omega in zip(X_cal, omegas))
                       + (lam if W_anc is not None else 0.0) + epsilon)
    safe_step = 1.0 / max(lipschitz, np.finfo(float).tiny)

    f = _objective(W, *args)
    g = _gradient(W, *args)
    history = [f]
    step = safe_step
    for iteration in range(max_iter):
        g_norm = float(np.linalg.norm(g))
        if g_norm < tol:
            logger.debug(f"ridge oracle converged in {iteration} iterations (|grad|={g_norm:.2e})")
            return OracleResult(W=W, objective=f, grad_norm=g_norm, iterations=iteration)
        reference = max(history[-memory:])
        t = step
        while True:
            W_new = W - t * g
            f_new = _objective(W_new, *args)
            if f_new <= reference - 1e-4 * t * g_norm * g_norm or t < 1e-30:
                break
            t *= 0.5
        g_new = _gradient(W_new, *args)
        s, y = W_new - W, g_new - g
        sy = float(np.sum(s * y))
        step = float(np.sum(s * s)) / sy if sy > 0 else safe_step
        W, f, g = W_new, f_new, g_new
        history.append(f)
    raise OracleFailure(f"ridge oracle did not converge in {max_iter} iterations (|grad|={np.linalg.norm(g):.2e})")
