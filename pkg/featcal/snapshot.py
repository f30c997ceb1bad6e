# featcal/featcal/snapshot.py
#
# One feature snapshot per layer: the inputs every calibrated module of the
# layer sees, from the source model and from each expert, on the same samples.

from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.errors import ShapeMismatchError
from core.layer_spec import LayerNormSpec, LinearSpec, ModelSpec
from core.model_engine import apply_layer, layer_module_inputs
from core.parameters import ParameterSet

FeatureSource = Literal["deployed", "merged", "expert"]


class ModuleSnapshot(BaseModel):
    """X_cal[i] and X_exp[i] are d x n_i with aligned columns."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    module_path: str
    layer_index: int
    spec: Union[LinearSpec, LayerNormSpec]
    task_indices: List[int]
    X_cal: List[np.ndarray]
    X_exp: List[np.ndarray]

    @property
    def n_effective(self) -> List[int]:
        return [X.shape[1] for X in self.X_cal]


class LayerSnapshot(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layer_index: int
    layer_inputs: List[np.ndarray]      # source-model input to the layer, per task
    modules: List[ModuleSnapshot]

    def module(self, path: str) -> ModuleSnapshot:
        for snap in self.modules:
            if snap.module_path == path:
                return snap
        raise KeyError(f"no snapshot for module '{path}' in layer {self.layer_index}")


def prefix_features(params: ParameterSet, spec: ModelSpec, batch: np.ndarray, layer_index: int) -> np.ndarray:
    """Input to layer `layer_index`, i.e. the output of layers 1..layer_index-1."""
    h = np.asarray(batch, dtype=np.float64)
    for index in range(1, layer_index):
        h = apply_layer(params, spec, index, h)
    return h


def collect_layer_snapshot(
    calibrated_so_far: ParameterSet,
    experts: Sequence[ParameterSet],
    spec: ModelSpec,
    calib_data: Sequence[np.ndarray],
    layer_index: int,
    module_paths: Optional[Sequence[str]] = None,
    feature_source: FeatureSource = "deployed",
    merged: Optional[ParameterSet] = None,
) -> LayerSnapshot:
    """Caches module inputs for one layer once, before any module in it changes.

    `feature_source` picks where X_cal comes from: the prefix-calibrated model
    (deployed), the untouched merged model (merged) or expert i itself (expert).
    """
    if len(experts) != len(calib_data):
        raise ShapeMismatchError("experts vs calibration sets", len(experts), len(calib_data))
    if feature_source == "merged" and merged is None:
        raise ValueError("feature_source='merged' needs the merged model")
    refs = spec.layer_modules(layer_index)
    wanted = [ref for ref in refs if module_paths is None or ref.path in module_paths]

    layer_inputs: List[np.ndarray] = []
    per_module_cal: Dict[str, List[np.ndarray]] = {ref.path: [] for ref in wanted}
    per_module_exp: Dict[str, List[np.ndarray]] = {ref.path: [] for ref in wanted}
    task_indices: List[int] = []

    for task, (expert, batch) in enumerate(zip(experts, calib_data)):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1] == 0:
            logger.warning(f"Task {task} has no calibration samples; skipped at layer {layer_index}")
            continue
        if feature_source == "deployed":
            source = calibrated_so_far
        elif feature_source == "merged":
            source = merged
        else:
            source = expert
        h_src = prefix_features(source, spec, batch, layer_index)
        h_exp = h_src if source is expert else prefix_features(expert, spec, batch, layer_index)
        inputs_src = layer_module_inputs(source, spec, layer_index, h_src)
        inputs_exp = layer_module_inputs(expert, spec, layer_index, h_exp)
        layer_inputs.append(h_src)
        task_indices.append(task)
        for ref in wanted:
            per_module_cal[ref.path].append(inputs_src[ref.path])
            per_module_exp[ref.path].append(inputs_exp[ref.path])

    modules = [
        ModuleSnapshot(
            module_path=ref.path,
            layer_index=layer_index,
            spec=ref.spec,
            task_indices=task_indices,
            X_cal=per_module_cal[ref.path],
            X_exp=per_module_exp[ref.path],
        )
        for ref in wanted
    ]
    logger.debug(
        f"Layer {layer_index} snapshot: {len(modules)} modules, {len(task_indices)} tasks, "
        f"source={feature_source}"
    )
    return LayerSnapshot(layer_index=layer_index, layer_inputs=layer_inputs, modules=modules)
