# featcal/featcal/closed_form.py
#
# Closed-form module updates. Feature matrices are d x n (column per sample),
# weights m x d, so a module maps X -> W X + b 1^T.

from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from core.errors import CalibrationError, ShapeMismatchError
from utils.validators import ensure_finite


class TaskStats(BaseModel):
    """Second moments of one task at one module."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    task_index: int
    G: np.ndarray
    C: np.ndarray
    omega: float
    n: int
    mu_cal: np.ndarray
    mu_tgt: np.ndarray


class ModuleStats(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tasks: List[TaskStats]

    @property
    def omegas(self) -> List[float]:
        return [t.omega for t in self.tasks]


class WeightSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    W: np.ndarray
    stabilized_residual: float      # residual of the system actually factorised
    stationary_residual: float      # residual of the unstabilised stationary condition


class LayerNormSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gamma: np.ndarray
    beta: np.ndarray
    clamped: int


def interpolate_target(X_exp: np.ndarray, X_cal: np.ndarray, alpha: float) -> np.ndarray:
    """X_tgt = alpha X_exp + (1 - alpha) X_cal."""
    if X_exp.shape != X_cal.shape:
        raise ShapeMismatchError("expert and calibration features differ", X_exp.shape, X_cal.shape)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * X_exp + (1.0 - alpha) * X_cal


def _column_weights(n: int, sample_weights: Optional[np.ndarray]) -> np.ndarray:
    if sample_weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeMismatchError("sample weights", n, w.shape[0])
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative with a positive sum")
    return w / w.sum()


def module_stats(
    X_cal: np.ndarray,
    X_tgt: np.ndarray,
    n: Optional[int] = None,
    sample_weights: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """G = X_cal X_cal^T / n and C = X_tgt X_cal^T / n (or the weighted moments)."""
    if X_cal.shape != X_tgt.shape:
        raise ShapeMismatchError("calibration and target features differ", X_cal.shape, X_tgt.shape)
    d, cols = X_cal.shape
    n = cols if n is None else n
    if cols == 0 or n == 0:
        logger.warning("module_stats called with no columns; returning zero moments")
        return np.zeros((d, d)), np.zeros((d, d))
    if n != cols:
        raise ShapeMismatchError("sample count", cols, n)
    w = _column_weights(cols, sample_weights)
    weighted = X_cal * w
    G = weighted @ X_cal.T
    C = (X_tgt * w) @ X_cal.T
    return 0.5 * (G + G.T), C


def task_weight(G: np.ndarray, epsilon: float) -> float:
    """omega = 1 / max(||G||_F, eps)."""
    return 1.0 / max(float(np.linalg.norm(G)), epsilon)


def anchor(P_mer: np.ndarray, P_base: np.ndarray, rho: float) -> np.ndarray:
    """rho P_mer + (1 - rho) P_base; rho may leave [0, 1]."""
    if np.shape(P_mer) != np.shape(P_base):
        raise ShapeMismatchError("merged and base parameters differ", np.shape(P_mer), np.shape(P_base))
    return rho * P_mer + (1.0 - rho) * P_base


def build_task_stats(
    task_index: int,
    X_cal: np.ndarray,
    X_tgt: np.ndarray,
    epsilon: float,
    weighting: str = "inverse_norm",
    sample_weights: Optional[np.ndarray] = None,
) -> TaskStats:
    G, C = module_stats(X_cal, X_tgt, sample_weights=sample_weights)
    w = _column_weights(X_cal.shape[1], sample_weights)
    omega = task_weight(G, epsilon) if weighting == "inverse_norm" else 1.0
    return TaskStats(
        task_index=task_index, G=G, C=C, omega=omega, n=X_cal.shape[1],
        mu_cal=X_cal @ w, mu_tgt=X_tgt @ w,
    )


def solve_weight(
    stats: ModuleStats,
    experts_W: Sequence[np.ndarray],
    W_anc: Optional[np.ndarray],
    lam: float,
    epsilon: float,
) -> WeightSolution:
    """Solves W (sum w_i G_i + (lam + eps) I) = sum w_i W_i C_i + lam W_anc.

    With no anchor the lam-terms are dropped. The SPD system is factorised
    once (Cholesky) and solved for all rows of W together.
    """
    if len(experts_W) != len(stats.tasks):
        raise ShapeMismatchError("expert weights vs task stats", len(stats.tasks), len(experts_W))
    if W_anc is None:
        lam = 0.0
    if lam < 0 or epsilon <= 0:
        raise ValueError("need lam >= 0 and epsilon > 0")
    if W_anc is not None:
        ensure_finite("anchor weight", W_anc)
    for W_i in experts_W:
        ensure_finite("expert weight", W_i)

    if stats.tasks:
        d = stats.tasks[0].G.shape[0]
        m = experts_W[0].shape[0]
    elif W_anc is not None:
        if lam == 0.0:
            raise CalibrationError("no task statistics and lam=0, so the anchor carries no weight")
        m, d = W_anc.shape
    else:
        raise CalibrationError("no task statistics and no anchor to solve against")

    lhs = np.zeros((d, d))
    rhs = np.zeros((m, d))
    for task, W_i in zip(stats.tasks, experts_W):
        if W_i.shape != (m, d):
            raise ShapeMismatchError(f"expert {task.task_index} weight", (m, d), W_i.shape)
        lhs += task.omega * task.G
        rhs += task.omega * (W_i @ task.C)
    if W_anc is not None:
        rhs += lam * W_anc
    system = lhs + (lam + epsilon) * np.eye(d)
    ensure_finite("solve matrix", system)
    ensure_finite("solve right-hand side", rhs)

    try:
        factor = cho_factor(system, lower=False, check_finite=False)
    except LinAlgError as e:
        raise CalibrationError(f"Cholesky factorisation failed: {e}") from e
    W = cho_solve(factor, rhs.T, check_finite=False).T

    scale = np.linalg.norm(W) * np.linalg.norm(system) + np.linalg.norm(rhs)
    scale = scale if scale > 0 else 1.0
    stabilized = float(np.linalg.norm(W @ system - rhs) / scale)
    stationary = float(np.linalg.norm(W @ (lhs + lam * np.eye(d)) - rhs) / scale)
    return WeightSolution(W=W, stabilized_residual=stabilized, stationary_residual=stationary)


def solve_bias(
    W_star: np.ndarray,
    stats: ModuleStats,
    experts_W: Sequence[np.ndarray],
    experts_b: Sequence[np.ndarray],
    b_anc: Optional[np.ndarray],
    lam: float,
) -> np.ndarray:
    """Second-stage bias with W* fixed:
    b* = (sum w_i (b_i + W_i mu_tgt_i - W* mu_cal_i) + lam b_anc) / (sum w_i + lam).
    """
    if b_anc is None:
        lam = 0.0
    numerator = np.zeros(W_star.shape[0])
    denominator = 0.0
    for task, W_i, b_i in zip(stats.tasks, experts_W, experts_b):
        numerator += task.omega * (b_i + W_i @ task.mu_tgt - W_star @ task.mu_cal)
        denominator += task.omega
    if b_anc is not None:
        numerator += lam * b_anc
        denominator += lam
    if denominator <= 0.0:
        if b_anc is None:
            raise CalibrationError("bias solve has no data and no anchor")
        raise CalibrationError("bias solve has no data and lam=0, so the anchor carries no weight")
    return numerator / denominator


def solve_layernorm(
    Z_cal: Sequence[np.ndarray],
    experts_gamma: Sequence[np.ndarray],
    experts_beta: Sequence[np.ndarray],
    gamma_anc: Optional[np.ndarray],
    beta_anc: Optional[np.ndarray],
    lam: float,
    epsilon: float,
) -> LayerNormSolution:
    """Coordinate-wise 2x2 normal equations for a shared affine map fitted to the
    expert affine maps on the current normalised features (equal task weights)."""
    if gamma_anc is None or beta_anc is None:
        lam = 0.0
        gamma_anc = beta_anc = None
    if not Z_cal:
        raise CalibrationError("layernorm solve has no tasks")
    d = Z_cal[0].shape[0]
    a11 = np.full(d, lam)
    a12 = np.zeros(d)
    r_gamma = np.zeros(d)
    r_beta = np.zeros(d)
    for Z, gamma_i, beta_i in zip(Z_cal, experts_gamma, experts_beta):
        z_bar = Z.mean(axis=1)
        q = np.mean(Z * Z, axis=1)
        a11 += q
        a12 += z_bar
        r_gamma += q * gamma_i + z_bar * beta_i
        r_beta += z_bar * gamma_i + beta_i
    a22 = len(Z_cal) + lam
    if gamma_anc is not None:
        r_gamma += lam * gamma_anc
        r_beta += lam * beta_anc
    D = a22 * a11 - a12 * a12
    clamped = int(np.sum(D < epsilon))
    if clamped:
        logger.warning(f"Clamped {clamped} near-singular LayerNorm determinants to eps={epsilon}")
    D = np.maximum(D, epsilon)
    gamma = (a22 * r_gamma - a12 * r_beta) / D
    beta = (a11 * r_beta - a12 * r_gamma) / D
    return LayerNormSolution(gamma=gamma, beta=beta, clamped=clamped)


def _data_term(
    W: np.ndarray,
    X_cal: Sequence[np.ndarray],
    X_tgt: Sequence[np.ndarray],
    experts_W: Sequence[np.ndarray],
    omegas: Sequence[float],
) -> float:
    total = 0.0
    for X, T, W_i, omega in zip(X_cal, X_tgt, experts_W, omegas):
        if X.shape[1] == 0:
            continue
        residual = W @ X - W_i @ T
        total += omega / X.shape[1] * float(np.sum(residual * residual))
    return total


def module_objective(
    W: np.ndarray,
    X_cal: Sequence[np.ndarray],
    X_tgt: Sequence[np.ndarray],
    experts_W: Sequence[np.ndarray],
    omegas: Sequence[float],
    lam: float,
    W_anc: Optional[np.ndarray],
) -> float:
    """sum_i (w_i / n_i) ||W X_cal_i - W_i X_tgt_i||_F^2 + lam ||W - W_anc||_F^2."""
    value = _data_term(W, X_cal, X_tgt, experts_W, omegas)
    if W_anc is not None:
        value += lam * float(np.sum((W - W_anc) ** 2))
    return value


def deployed_excess(
    W_src: np.ndarray,
    W_dep: np.ndarray,
    X_dep: Sequence[np.ndarray],
    X_tgt: Sequence[np.ndarray],
    experts_W: Sequence[np.ndarray],
    omegas: Sequence[float],
    lam: float,
    W_anc: Optional[np.ndarray],
) -> float:
    """Excess of the deployed-input objective at a weight fitted on other inputs.

    Non-negative whenever W_dep minimises the deployed objective.
    """
    return (module_objective(W_src, X_dep, X_tgt, experts_W, omegas, lam, W_anc)
            - module_objective(W_dep, X_dep, X_tgt, experts_W, omegas, lam, W_anc))
