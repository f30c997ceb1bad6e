# featcal/featcal/calibrator.py
#
# Forward-order, layer-atomic calibration of a merged model towards its experts.

import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel

from core.errors import CalibrationError, FeatCalError
from core.layer_spec import LayerNormSpec, LinearSpec, ModelSpec
from core.model_engine import layernorm_normalize
from core.parameters import ParameterSet, Role
from featcal.calib_config import CalibConfig
from featcal.closed_form import (
    ModuleStats,
    anchor,
    build_task_stats,
    interpolate_target,
    module_objective,
    solve_bias,
    solve_layernorm,
    solve_weight,
)
from featcal.snapshot import LayerSnapshot, ModuleSnapshot, collect_layer_snapshot


class ModuleLog(BaseModel):
    module_path: str
    layer_index: int
    kind: str
    tasks_used: int
    n_effective: List[int]
    omegas: List[float] = []
    anchor_norm: Optional[float] = None
    solve_residual: Optional[float] = None
    stationary_residual: Optional[float] = None
    objective_before: Optional[float] = None
    objective_after: Optional[float] = None
    distance_to_merged: float = 0.0
    bias_calibrated: bool = False
    clamped_determinants: int = 0


class LayerLog(BaseModel):
    layer_index: int
    wall_time_s: float
    modules: List[str]


class CalibrationLog(BaseModel):
    config: CalibConfig
    modules: List[ModuleLog] = []
    layers: List[LayerLog] = []

    def module(self, path: str) -> ModuleLog:
        for entry in self.modules:
            if entry.module_path == path:
                return entry
        raise KeyError(path)


SnapshotHook = Callable[[LayerSnapshot], None]


def _calibrate_linear(
    snap: ModuleSnapshot,
    merged: ParameterSet,
    base: Optional[ParameterSet],
    experts: Sequence[ParameterSet],
    config: CalibConfig,
) -> Tuple[Dict[str, np.ndarray], ModuleLog]:
    path = snap.module_path
    W_key, b_key = f"{path}.weight", f"{path}.bias"
    active = snap.task_indices
    experts_W = [experts[i][W_key] for i in active]

    X_tgt = [interpolate_target(X_e, X_c, config.alpha) for X_e, X_c in zip(snap.X_exp, snap.X_cal)]
    stats = ModuleStats(tasks=[
        build_task_stats(i, X_c, X_t, config.epsilon, config.task_weighting)
        for i, X_c, X_t in zip(active, snap.X_cal, X_tgt)
    ])
    W_mer = merged[W_key]
    W_anc = anchor(W_mer, base[W_key], config.rho) if base is not None else None
    if not stats.tasks and W_anc is None:
        logger.warning(f"{path}: no calibration data and no anchor; left unchanged")
        return {}, ModuleLog(module_path=path, layer_index=snap.layer_index, kind="linear",
                             tasks_used=0, n_effective=[])

    solution = solve_weight(stats, experts_W, W_anc, config.lam, config.epsilon)
    updates = {W_key: solution.W}
    if solution.stabilized_residual > 1e-8:
        raise CalibrationError(f"weight solve residual {solution.stabilized_residual:.3e} exceeds 1e-8", path)

    bias_done = False
    if config.calibrate_bias and snap.spec.has_bias:
        b_anc = anchor(merged[b_key], base[b_key], config.rho) if base is not None else None
        experts_b = [experts[i][b_key] for i in active]
        updates[b_key] = solve_bias(solution.W, stats, experts_W, experts_b, b_anc, config.lam)
        bias_done = True

    lam = config.lam if W_anc is not None else 0.0
    before = module_objective(W_mer, snap.X_cal, X_tgt, experts_W, stats.omegas, lam, W_anc)
    after = module_objective(solution.W, snap.X_cal, X_tgt, experts_W, stats.omegas, lam, W_anc)
    log = ModuleLog(
        module_path=path,
        layer_index=snap.layer_index,
        kind="linear",
        tasks_used=len(active),
        n_effective=snap.n_effective,
        omegas=stats.omegas,
        anchor_norm=float(np.linalg.norm(W_anc)) if W_anc is not None else None,
        solve_residual=solution.stabilized_residual,
        stationary_residual=solution.stationary_residual,
        objective_before=before,
        objective_after=after,
        distance_to_merged=float(np.linalg.norm(solution.W - W_mer)),
        bias_calibrated=bias_done,
    )
    logger.debug(
        f"{path}: residual={solution.stabilized_residual:.2e} objective {before:.4e} -> {after:.4e} "
        f"|W*-W_mer|={log.distance_to_merged:.4f}"
    )
    return updates, log


def _calibrate_layernorm(
    snap: ModuleSnapshot,
    merged: ParameterSet,
    base: Optional[ParameterSet],
    experts: Sequence[ParameterSet],
    config: CalibConfig,
) -> Tuple[Dict[str, np.ndarray], ModuleLog]:
    path = snap.module_path
    g_key, b_key = f"{path}.gamma", f"{path}.beta"
    active = snap.task_indices
    if not active:
        logger.warning(f"{path}: no calibration data; left unchanged")
        return {}, ModuleLog(module_path=path, layer_index=snap.layer_index, kind="layernorm",
                             tasks_used=0, n_effective=[])
    Z_cal = [layernorm_normalize(X, snap.spec.eps) for X in snap.X_cal]
    gamma_anc = beta_anc = None
    if base is not None:
        gamma_anc = anchor(merged[g_key], base[g_key], config.rho)
        beta_anc = anchor(merged[b_key], base[b_key], config.rho)
    solution = solve_layernorm(
        Z_cal,
        [experts[i][g_key] for i in active],
        [experts[i][b_key] for i in active],
        gamma_anc, beta_anc, config.lam, config.epsilon,
    )
    distance = float(np.sqrt(np.sum((solution.gamma - merged[g_key]) ** 2)
                             + np.sum((solution.beta - merged[b_key]) ** 2)))
    log = ModuleLog(
        module_path=path,
        layer_index=snap.layer_index,
        kind="layernorm",
        tasks_used=len(active),
        n_effective=snap.n_effective,
        anchor_norm=float(np.linalg.norm(np.concatenate([gamma_anc, beta_anc]))) if gamma_anc is not None else None,
        distance_to_merged=distance,
        clamped_determinants=solution.clamped,
    )
    return {g_key: solution.gamma, b_key: solution.beta}, log


def _selected_paths(spec: ModelSpec, layer_index: int, config: CalibConfig) -> List[str]:
    paths = []
    for ref in spec.layer_modules(layer_index):
        if not config.selects(ref.path):
            continue
        if isinstance(ref.spec, LayerNormSpec) and not config.calibrate_layernorm:
            continue
        paths.append(ref.path)
    return paths


def calibrate_layer(
    current: ParameterSet,
    merged: ParameterSet,
    base: Optional[ParameterSet],
    experts: Sequence[ParameterSet],
    spec: ModelSpec,
    snapshot: LayerSnapshot,
    config: CalibConfig,
    module_order: Optional[Sequence[str]] = None,
) -> Tuple[ParameterSet, List[ModuleLog]]:
    """Solves every module of one layer against the shared snapshot, then loads
    all updates at once."""
    order = list(module_order) if module_order is not None else [snap.module_path for snap in snapshot.modules]
    staged: Dict[str, np.ndarray] = {}
    logs: List[ModuleLog] = []
    for path in order:
        snap = snapshot.module(path)
        try:
            if isinstance(snap.spec, LinearSpec):
                updates, log = _calibrate_linear(snap, merged, base, experts, config)
            else:
                updates, log = _calibrate_layernorm(snap, merged, base, experts, config)
        except CalibrationError as e:
            if e.module_path is None:
                raise CalibrationError(str(e), path) from e
            raise
        except (FeatCalError, ValueError, KeyError) as e:
            raise CalibrationError(str(e), path) from e
        staged.update(updates)
        logs.append(log)
    return current.replace(staged, role=Role.calibrated()), logs


def calibrate(
    merged: ParameterSet,
    base: Optional[ParameterSet],
    experts: Sequence[ParameterSet],
    spec: ModelSpec,
    calib_data: Sequence[np.ndarray],
    config: Optional[CalibConfig] = None,
    on_snapshot: Optional[SnapshotHook] = None,
) -> Tuple[ParameterSet, CalibrationLog]:
    """Calibrates backbone layers 1..L in forward order.

    Each task contributes its first `config.n` calibration columns; the same
    columns are reused at every layer.
    """
    config = config or CalibConfig()
    if len(experts) != len(calib_data):
        raise CalibrationError(f"{len(experts)} experts but {len(calib_data)} calibration sets")
    for params in [merged, base, *experts]:
        if params is not None:
            params.check_against(spec)
    batches = [np.asarray(X, dtype=np.float64)[:, :config.n] for X in calib_data]

    current = merged.with_role(Role.calibrated())
    log = CalibrationLog(config=config)
    logger.info(
        f"Calibrating {spec.num_layers} layers against {len(experts)} experts "
        f"(lambda={config.lam}, rho={config.rho}, alpha={config.alpha}, n={config.n}, source={config.feature_source})"
    )
    for layer_index in range(1, spec.num_layers + 1):
        paths = _selected_paths(spec, layer_index, config)
        if not paths:
            continue
        started = time.perf_counter()
        snapshot = collect_layer_snapshot(
            current, experts, spec, batches, layer_index,
            module_paths=paths, feature_source=config.feature_source, merged=merged,
        )
        if on_snapshot is not None:
            on_snapshot(snapshot)
        current, module_logs = calibrate_layer(current, merged, base, experts, spec, snapshot, config)
        elapsed = time.perf_counter() - started
        log.modules.extend(module_logs)
        log.layers.append(LayerLog(layer_index=layer_index, wall_time_s=elapsed, modules=paths))
        logger.info(f"Layer {layer_index}: calibrated {len(paths)} modules in {elapsed:.3f}s")
    return current, log
