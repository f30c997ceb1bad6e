# featcal/analysis/output_drift.py
#
# From final-feature drift to score, probability and loss drift for linear heads.

from typing import Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.errors import ShapeMismatchError
from core.losses import cross_entropy, softmax_columns, top1
from core.parameters import FeatureTrace, ParameterSet

BOUND_SLACK = 1e-12


class LinearHead(BaseModel):
    """psi(h) = W h + b."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    @classmethod
    def from_params(cls, params: ParameterSet, path: str = "head.linear") -> "LinearHead":
        bias_key = f"{path}.bias"
        return cls(weight=params[f"{path}.weight"], bias=params[bias_key] if bias_key in params else None)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        scores = self.weight @ features
        if self.bias is not None:
            scores = scores + self.bias[:, None]
        return scores

    def spectral_norm(self) -> float:
        return float(np.linalg.norm(self.weight, 2))


class OutputDriftReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    delta_z: np.ndarray
    delta_z_norm: np.ndarray
    eL_norm: np.ndarray
    B: float
    delta_psi: np.ndarray
    bound: np.ndarray
    bound_holds: bool
    min_margin: np.ndarray          # NaN where the expert winner is tied
    margin_preserved: np.ndarray
    decision_agrees: np.ndarray
    margin_misfires: int
    loss_drift: np.ndarray
    mean_gradient: np.ndarray       # g_bar per sample, K x M
    loss_bound: np.ndarray
    loss_identity_residual: float
    feature_loss_bound: np.ndarray
    quadrature_nodes: int


class BridgeResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    integral: np.ndarray
    direct: np.ndarray
    residual: float
    nodes_used: int


def softmax_jacobian(z: np.ndarray) -> np.ndarray:
    """diag(p) - p p^T for a single score vector."""
    p = softmax_columns(np.asarray(z, dtype=np.float64).reshape(-1))
    return np.diag(p) - np.outer(p, p)


def probability_bridge(z: np.ndarray, dz: np.ndarray, nodes: int = 33, tol: float = 1e-10, max_nodes: int = 1025) -> BridgeResult:
    """p(z + dz) - p(z) as the trapezoid average of J_sm(z + t dz) dz."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dz = np.asarray(dz, dtype=np.float64).reshape(-1)
    if z.shape != dz.shape:
        raise ShapeMismatchError("logits and perturbation differ", z.shape, dz.shape)

    def integrand(t: float) -> np.ndarray:
        return softmax_jacobian(z + t * dz) @ dz

    n = nodes
    step = 1.0 / (n - 1)
    values = [integrand(t) for t in np.linspace(0.0, 1.0, n)]
    total = step * (sum(values) - 0.5 * (values[0] + values[-1]))
    while 2 * n - 1 <= max_nodes:
        half = step / 2.0
        refined = 0.5 * total + half * sum(integrand(t) for t in np.arange(n - 1) * step + half)
        change = float(np.max(np.abs(refined - total)))
        total, n, step = refined, 2 * n - 1, half
        if change < tol:
            break
    direct = softmax_columns(z + dz) - softmax_columns(z)
    return BridgeResult(integral=total, direct=direct, residual=float(np.max(np.abs(total - direct))), nodes_used=n)


def _top_two_margin(scores: np.ndarray) -> np.ndarray:
    if scores.shape[0] < 2:
        return np.full(scores.shape[1], np.inf)
    ordered = np.sort(scores, axis=0)
    margin = ordered[-1] - ordered[-2]
    return np.where(margin > 0, margin, np.nan)


def _midpoint_gradient(z: np.ndarray, dz: np.ndarray, labels: np.ndarray, nodes: int) -> np.ndarray:
    """Midpoint rule for g_bar = integral of (softmax(z + t dz) - onehot(y)) dt."""
    ts = (np.arange(nodes) + 0.5) / nodes
    acc = np.zeros_like(z)
    for t in ts:
        acc += softmax_columns(z + t * dz)
    g = acc / nodes
    g[labels, np.arange(z.shape[1])] -= 1.0
    return g


def mean_loss_gradient(
    z: np.ndarray,
    dz: np.ndarray,
    labels: np.ndarray,
    nodes: int = 32,
    tol: float = 1e-10,
    max_nodes: int = 8192,
) -> Tuple[np.ndarray, int]:
    """Path-averaged cross-entropy gradient along z -> z + dz.

    Midpoint estimates at doubling node counts, Richardson-extrapolated
    ((4 M_2n - M_n) / 3), until successive extrapolants agree within `tol`.
    """
    coarse = _midpoint_gradient(z, dz, labels, nodes)
    previous = None
    n = nodes
    while 2 * n <= max_nodes:
        fine = _midpoint_gradient(z, dz, labels, 2 * n)
        extrapolated = (4.0 * fine - coarse) / 3.0
        n *= 2
        if previous is not None and np.max(np.abs(extrapolated - previous)) < tol:
            return extrapolated, n
        previous, coarse = extrapolated, fine
    logger.warning(f"Loss-gradient quadrature hit the {max_nodes}-node cap")
    return previous if previous is not None else coarse, n


def output_drift_report(
    head_mer: LinearHead,
    head_exp: LinearHead,
    trace_exp: FeatureTrace,
    trace_mer: FeatureTrace,
    labels: np.ndarray,
    nodes: int = 32,
) -> OutputDriftReport:
    h_exp, h_mer = trace_exp.final, trace_mer.final
    if h_exp.shape != h_mer.shape:
        raise ShapeMismatchError("final feature shapes differ", h_exp.shape, h_mer.shape)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)

    z_exp = head_exp(h_exp)
    z_mer = head_mer(h_mer)
    delta_z = z_mer - z_exp
    dz_norm = np.linalg.norm(delta_z, axis=0)
    eL_norm = np.linalg.norm(h_mer - h_exp, axis=0)

    B = head_mer.spectral_norm()
    delta_psi = np.linalg.norm(head_mer(h_exp) - z_exp, axis=0)
    bound = B * eL_norm + delta_psi
    bound_holds = bool(np.all(dz_norm <= bound + BOUND_SLACK * np.maximum(1.0, bound)))

    margin = _top_two_margin(z_exp)
    with np.errstate(invalid="ignore"):
        preserved = np.max(np.abs(delta_z), axis=0) < margin / 2.0
    preserved = preserved & ~np.isnan(margin)
    agrees = top1(z_mer) == top1(z_exp)
    misfires = int(np.sum(preserved & ~agrees))
    if misfires:
        logger.error(f"Margin rule misfired on {misfires} samples")

    loss_drift = cross_entropy(z_mer, labels) - cross_entropy(z_exp, labels)
    g_bar, used = mean_loss_gradient(z_exp, delta_z, labels, nodes=nodes)
    identity = float(np.max(np.abs(np.sum(g_bar * delta_z, axis=0) - loss_drift), initial=0.0))
    loss_bound = np.linalg.norm(g_bar, axis=0) * dz_norm

    logger.debug(
        f"Output drift: mean |dz|={dz_norm.mean():.4f}, B={B:.4f}, "
        f"margin-preserved={preserved.mean():.3f}, loss identity residual={identity:.2e}"
    )
    return OutputDriftReport(
        delta_z=delta_z,
        delta_z_norm=dz_norm,
        eL_norm=eL_norm,
        B=B,
        delta_psi=delta_psi,
        bound=bound,
        bound_holds=bound_holds,
        min_margin=margin,
        margin_preserved=preserved,
        decision_agrees=agrees,
        margin_misfires=misfires,
        loss_drift=loss_drift,
        mean_gradient=g_bar,
        loss_bound=loss_bound,
        loss_identity_residual=identity,
        feature_loss_bound=np.sqrt(2.0) * bound,
        quadrature_nodes=used,
    )
