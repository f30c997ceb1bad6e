# featcal/analysis/drift_analysis.py
#
# Layer-wise drift between a merged model and one expert on the same batch:
# exact decomposition e = m + p, residual-branch accounting, path-averaged
# Jacobians and the propagation of local mismatches to the final layer.

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.errors import ShapeMismatchError, SpecError
from core.layer_spec import LinearSpec, ModelSpec, ResidualBlockSpec, module_path
from core.model_engine import (
    activation_pattern,
    apply_layer,
    branch_jacobian,
    layer_is_smooth,
    layer_jacobian,
    residual_branch,
)
from core.parameters import FeatureTrace, ParameterSet

DEFAULT_NODES = 33
QUADRATURE_TOL = 1e-8
MAX_NODES = 1025


class DriftRecord(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layer: int
    e_prev: np.ndarray
    e: np.ndarray
    m: np.ndarray
    p: np.ndarray
    r: Optional[np.ndarray] = None
    e_norm: np.ndarray
    m_norm: np.ndarray
    p_norm: np.ndarray
    cosine_to_expert: np.ndarray
    decomposition_residual: float
    residual_identity_residual: Optional[float] = None


class AveragedJacobian(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    A: np.ndarray
    nodes_used: int
    achieved_tolerance: float
    non_smooth: bool = False


class PropagationReport(BaseModel):
    """A[l-1] has shape (M, d_l, d_{l-1}): one averaged Jacobian per sample."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    A: List[np.ndarray]
    samples: List[int]
    reconstructed_eL: np.ndarray
    actual_eL: np.ndarray
    relative_error: float
    quadrature_nodes: int
    recursion_residuals: List[float]
    non_smooth: bool


class GrowthCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    layer: int
    sample: int
    gamma: float
    eta: float
    e_prev_norm: float
    e_norm: float
    condition_holds: bool
    growth_observed: bool
    bound_holds: bool
    identity_gap: float = 0.0
    zero_drift: bool = False


class CumulativeGrowth(BaseModel):
    model_config = ConfigDict(frozen=True)

    applicable: bool
    product: float
    e_start_norm: float
    e_end_norm: float
    bound_holds: bool


def _column_norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=0)


def column_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-column cosine; two zero columns count as aligned (1.0)."""
    na, nb = _column_norms(a), _column_norms(b)
    dots = np.sum(a * b, axis=0)
    out = np.zeros(a.shape[1])
    both = (na > 0) & (nb > 0)
    out[both] = dots[both] / (na[both] * nb[both])
    out[(na == 0) & (nb == 0)] = 1.0
    return out


def layer_drift(trace_exp: FeatureTrace, trace_mer: FeatureTrace) -> List[np.ndarray]:
    """e_l = h_mer_l - h_exp_l for l = 0..L."""
    if trace_exp.num_layers != trace_mer.num_layers:
        raise ShapeMismatchError("traces differ in depth", trace_exp.num_layers, trace_mer.num_layers)
    drifts = []
    for index, (h_exp, h_mer) in enumerate(zip(trace_exp.per_layer, trace_mer.per_layer)):
        if h_exp.shape != h_mer.shape:
            raise ShapeMismatchError(f"layer {index} feature shapes differ", h_exp.shape, h_mer.shape)
        drifts.append(h_mer - h_exp)
    return drifts


def decompose_layer(
    params_mer: ParameterSet,
    params_exp: ParameterSet,
    spec: ModelSpec,
    layer_index: int,
    trace_exp: FeatureTrace,
    trace_mer: FeatureTrace,
) -> DriftRecord:
    layer = spec.layer(layer_index)
    h_exp_prev = trace_exp.per_layer[layer_index - 1]
    h_mer_prev = trace_mer.per_layer[layer_index - 1]
    h_exp = trace_exp.per_layer[layer_index]
    h_mer = trace_mer.per_layer[layer_index]

    mer_at_exp = apply_layer(params_mer, spec, layer_index, h_exp_prev)
    exp_at_exp = apply_layer(params_exp, spec, layer_index, h_exp_prev)
    mer_at_mer = apply_layer(params_mer, spec, layer_index, h_mer_prev)

    e_prev = h_mer_prev - h_exp_prev
    e = h_mer - h_exp
    m = mer_at_exp - exp_at_exp
    p = mer_at_mer - mer_at_exp

    r = None
    residual_identity = None
    if isinstance(layer, ResidualBlockSpec):
        r = (residual_branch(params_mer, spec, layer_index, h_mer_prev)
             - residual_branch(params_mer, spec, layer_index, h_exp_prev))
        residual_identity = float(np.max(np.abs(e - (e_prev + r + m)), initial=0.0))

    return DriftRecord(
        layer=layer_index,
        e_prev=e_prev,
        e=e,
        m=m,
        p=p,
        r=r,
        e_norm=_column_norms(e),
        m_norm=_column_norms(m),
        p_norm=_column_norms(p),
        cosine_to_expert=column_cosine(h_mer, h_exp),
        decomposition_residual=float(np.max(np.abs(e - (m + p)), initial=0.0)),
        residual_identity_residual=residual_identity,
    )


def decompose_all(
    params_mer: ParameterSet,
    params_exp: ParameterSet,
    spec: ModelSpec,
    trace_exp: FeatureTrace,
    trace_mer: FeatureTrace,
) -> List[DriftRecord]:
    return [
        decompose_layer(params_mer, params_exp, spec, index, trace_exp, trace_mer)
        for index in range(1, spec.num_layers + 1)
    ]


def _trapezoid_segment(
    jac_at: Callable[[np.ndarray], np.ndarray],
    h_start: np.ndarray,
    direction: np.ndarray,
    nodes: int,
    tol: float,
    max_nodes: int,
) -> Tuple[np.ndarray, int, float]:
    """Composite trapezoid of jac_at over h_start + t*direction, t in [0, 1].

    Doubles the interval count (n -> 2n - 1 nodes) reusing previous nodes until
    successive estimates differ by less than `tol` in Frobenius norm.
    """
    ts = np.linspace(0.0, 1.0, nodes)
    values = [jac_at(h_start + t * direction) for t in ts]
    step = 1.0 / (nodes - 1)
    total = step * (sum(values) - 0.5 * (values[0] + values[-1]))
    n, achieved = nodes, float("inf")
    while 2 * n - 1 <= max_nodes:
        new_step = step / 2.0
        mids = np.arange(n - 1) * step + new_step
        refined = 0.5 * total + new_step * sum(jac_at(h_start + t * direction) for t in mids)
        achieved = float(np.linalg.norm(refined - total))
        total, n, step = refined, 2 * n - 1, new_step
        logger.trace(f"quadrature refined to {n} nodes (delta={achieved:.3e})")
        if achieved < tol:
            break
    else:
        if achieved >= tol:
            logger.warning(f"Quadrature hit the {max_nodes}-node cap at tolerance {achieved:.3e}")
    return total, n, achieved


def _segment_jacobian(
    jac_fn: Callable,
    params_mer: ParameterSet,
    spec: ModelSpec,
    layer_index: int,
    h_start: np.ndarray,
    e_prev: np.ndarray,
    nodes: int,
    tol: float,
    max_nodes: int,
) -> AveragedJacobian:
    if nodes < 2:
        raise ValueError("quadrature needs at least 2 nodes")
    h_start = np.asarray(h_start, dtype=np.float64).reshape(-1)
    e_prev = np.asarray(e_prev, dtype=np.float64).reshape(-1)
    if h_start.shape != e_prev.shape:
        raise ShapeMismatchError("segment start and direction differ", h_start.shape, e_prev.shape)

    smooth = layer_is_smooth(spec, layer_index)
    patterns: List[np.ndarray] = []

    def jac_at(point: np.ndarray) -> np.ndarray:
        if not smooth:
            patterns.append(activation_pattern(params_mer, spec, layer_index, point))
        return jac_fn(params_mer, spec, layer_index, point)

    if not np.any(e_prev):
        return AveragedJacobian(A=jac_at(h_start), nodes_used=1, achieved_tolerance=0.0,
                                non_smooth=_crosses_kink(patterns))

    A, used, achieved = _trapezoid_segment(jac_at, h_start, e_prev, nodes, tol, max_nodes)
    non_smooth = _crosses_kink(patterns)
    if non_smooth:
        logger.warning(f"Layer {layer_index}: segment crosses a non-smooth point; averaged Jacobian is a.e. only")
    return AveragedJacobian(A=A, nodes_used=used, achieved_tolerance=achieved, non_smooth=non_smooth)


def _crosses_kink(patterns: Sequence[np.ndarray]) -> bool:
    if not patterns:
        return False
    first = patterns[0]
    return any(np.any(p == 0) or not np.array_equal(p, first) for p in patterns)


def averaged_jacobian(
    params_mer: ParameterSet,
    spec: ModelSpec,
    layer_index: int,
    h_start: np.ndarray,
    e_prev: np.ndarray,
    nodes: int = DEFAULT_NODES,
    tol: float = QUADRATURE_TOL,
    max_nodes: int = MAX_NODES,
) -> AveragedJacobian:
    """A = integral over t in [0, 1] of J f_mer(h_start + t e_prev)."""
    layer = spec.layer(layer_index)
    if isinstance(layer, LinearSpec):
        return AveragedJacobian(
            A=np.array(params_mer[f"{module_path(layer_index, layer)}.weight"]),
            nodes_used=nodes,
            achieved_tolerance=0.0,
        )
    return _segment_jacobian(layer_jacobian, params_mer, spec, layer_index, h_start, e_prev, nodes, tol, max_nodes)


def residual_averaged_jacobian(
    params_mer: ParameterSet,
    spec: ModelSpec,
    layer_index: int,
    h_start: np.ndarray,
    e_prev: np.ndarray,
    nodes: int = DEFAULT_NODES,
    tol: float = QUADRATURE_TOL,
    max_nodes: int = MAX_NODES,
) -> AveragedJacobian:
    """R = segment average of the residual-branch Jacobian, so that r = R e_prev."""
    if not isinstance(spec.layer(layer_index), ResidualBlockSpec):
        raise SpecError("not a residual block", layer_index)
    return _segment_jacobian(branch_jacobian, params_mer, spec, layer_index, h_start, e_prev, nodes, tol, max_nodes)


def final_drift_expansion(
    params_mer: ParameterSet,
    params_exp: ParameterSet,
    spec: ModelSpec,
    trace_exp: FeatureTrace,
    trace_mer: FeatureTrace,
    nodes: int = DEFAULT_NODES,
    samples: Optional[Sequence[int]] = None,
    tol: float = QUADRATURE_TOL,
) -> PropagationReport:
    """Reconstructs e_L = sum_l P_{l->L} m_l with P_{l->L} = A_L ... A_{l+1}."""
    records = decompose_all(params_mer, params_exp, spec, trace_exp, trace_mer)
    drifts = layer_drift(trace_exp, trace_mer)
    columns = list(range(trace_exp.num_columns)) if samples is None else list(samples)
    L = spec.num_layers

    per_layer_A: List[List[np.ndarray]] = [[] for _ in range(L)]
    recursion = [0.0] * L
    max_nodes_used = 0
    non_smooth = False
    reconstructed = np.zeros((drifts[L].shape[0], len(columns)))

    for col_pos, s in enumerate(columns):
        A_s: List[np.ndarray] = []
        for index in range(1, L + 1):
            avg = averaged_jacobian(
                params_mer, spec, index,
                trace_exp.per_layer[index - 1][:, s], drifts[index - 1][:, s],
                nodes=nodes, tol=tol,
            )
            non_smooth |= avg.non_smooth
            max_nodes_used = max(max_nodes_used, avg.nodes_used)
            A_s.append(avg.A)
            per_layer_A[index - 1].append(avg.A)
            step = drifts[index][:, s] - (avg.A @ drifts[index - 1][:, s] + records[index - 1].m[:, s])
            recursion[index - 1] = max(recursion[index - 1], float(np.max(np.abs(step), initial=0.0)))

        downstream = np.eye(drifts[L].shape[0])
        total = np.zeros(drifts[L].shape[0])
        for index in range(L, 0, -1):
            total += downstream @ records[index - 1].m[:, s]
            downstream = downstream @ A_s[index - 1]
        reconstructed[:, col_pos] = total

    actual = drifts[L][:, columns]
    relative = float(np.linalg.norm(reconstructed - actual) / max(np.linalg.norm(actual), np.finfo(float).eps))
    logger.debug(f"Final-drift reconstruction over {len(columns)} samples: relative error {relative:.3e}")
    return PropagationReport(
        A=[np.stack(layer_A) if layer_A else np.zeros((0, 0, 0)) for layer_A in per_layer_A],
        samples=columns,
        reconstructed_eL=reconstructed,
        actual_eL=actual,
        relative_error=relative,
        quadrature_nodes=max_nodes_used,
        recursion_residuals=recursion,
        non_smooth=non_smooth,
    )


def growth_check(record: DriftRecord, sample: int, R: Optional[np.ndarray] = None) -> GrowthCheck:
    """Directional expansion gamma and mismatch ratio eta at one sample.

    Without `R` the expansion (I + R) v is read off the exact identity
    v + r; with `R` the supplied averaged branch Jacobian is used.
    """
    v = record.e_prev[:, sample]
    v_norm = float(np.linalg.norm(v))
    e_norm = float(np.linalg.norm(record.e[:, sample]))
    if v_norm == 0.0:
        return GrowthCheck(
            layer=record.layer, sample=sample, gamma=float("nan"), eta=float("nan"),
            e_prev_norm=0.0, e_norm=e_norm, condition_holds=False,
            growth_observed=e_norm > 0.0, bound_holds=True, zero_drift=True,
        )
    if R is not None:
        expanded = v + R @ v
    elif record.r is not None:
        expanded = v + record.r[:, sample]
    else:
        raise SpecError("growth check needs a residual block or an explicit R", record.layer)

    m = record.m[:, sample]
    gamma = float(np.linalg.norm(expanded)) / v_norm - 1.0
    eta = float(np.linalg.norm(m)) / v_norm
    # floating-point (or quadrature) gap between e and (I + R)v + m
    gap = float(np.linalg.norm(record.e[:, sample] - (expanded + m)))
    condition = eta < gamma and gamma > 0.0
    bound_holds = (not condition) or e_norm >= (1.0 + gamma - eta) * v_norm - 1e-12 * v_norm - gap
    if not bound_holds:
        logger.warning(f"Layer {record.layer} sample {sample}: growth bound violated (gamma={gamma}, eta={eta})")
    return GrowthCheck(
        layer=record.layer, sample=sample, gamma=gamma, eta=eta,
        e_prev_norm=v_norm, e_norm=e_norm, condition_holds=condition,
        growth_observed=e_norm > v_norm, bound_holds=bound_holds, identity_gap=gap,
    )


def cumulative_growth_check(
    checks: Sequence[GrowthCheck],
    e_start_norm: Optional[float] = None,
    e_end_norm: Optional[float] = None,
) -> CumulativeGrowth:
    """Product bound ||e_end|| >= prod(1 + gamma - eta) ||e_start|| over consecutive
    qualifying layers of one sample."""
    if not checks:
        raise ValueError("no growth checks given")
    start = checks[0].e_prev_norm if e_start_norm is None else e_start_norm
    end = checks[-1].e_norm if e_end_norm is None else e_end_norm
    layers = [c.layer for c in checks]
    consecutive = layers == list(range(layers[0], layers[0] + len(layers)))
    applicable = consecutive and all(c.condition_holds for c in checks)
    if not applicable:
        return CumulativeGrowth(applicable=False, product=float("nan"), e_start_norm=start,
                                e_end_norm=end, bound_holds=True)
    product, slack = 1.0, 0.0
    for c in checks:
        factor = 1.0 + c.gamma - c.eta
        product *= factor
        slack = factor * slack + 1e-12 * c.e_prev_norm + c.identity_gap
    holds = end >= product * start - slack
    return CumulativeGrowth(applicable=True, product=product, e_start_norm=start,
                            e_end_norm=end, bound_holds=holds)
