# featcal/analysis/task_analysis.py

from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from analysis.drift_analysis import (
    DEFAULT_NODES,
    DriftRecord,
    GrowthCheck,
    PropagationReport,
    decompose_all,
    final_drift_expansion,
    growth_check,
)
from analysis.output_drift import LinearHead, OutputDriftReport, output_drift_report
from core.layer_spec import ModelSpec, ResidualBlockSpec
from core.model_engine import forward_trace
from core.parameters import ParameterSet


class TaskDriftAnalysis(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    task_index: int
    records: List[DriftRecord]
    growth: List[GrowthCheck]
    propagation: Optional[PropagationReport] = None
    output: Optional[OutputDriftReport] = None

    @property
    def final_drift(self) -> np.ndarray:
        return self.records[-1].e_norm


def analyze_task(
    task_index: int,
    params_mer: ParameterSet,
    params_exp: ParameterSet,
    spec: ModelSpec,
    batch: np.ndarray,
    labels: Optional[np.ndarray] = None,
    nodes: int = DEFAULT_NODES,
    propagation_samples: Optional[Sequence[int]] = (),
) -> TaskDriftAnalysis:
    """Every drift diagnostic for one task on one batch.

    `params_mer` must already carry the head it scores this task with.
    `propagation_samples=None` propagates every column; an empty sequence skips
    the (quadrature-heavy) propagation step.
    """
    trace_exp = forward_trace(params_exp, spec, batch)
    trace_mer = forward_trace(params_mer, spec, batch)
    records = decompose_all(params_mer, params_exp, spec, trace_exp, trace_mer)

    growth = [
        growth_check(record, s)
        for record in records
        if isinstance(spec.layer(record.layer), ResidualBlockSpec)
        for s in range(trace_exp.num_columns)
    ]

    propagation = None
    if propagation_samples is None or len(propagation_samples) > 0:
        propagation = final_drift_expansion(
            params_mer, params_exp, spec, trace_exp, trace_mer, nodes=nodes, samples=propagation_samples,
        )

    output = None
    if labels is not None and spec.head is not None:
        output = output_drift_report(
            LinearHead.from_params(params_mer), LinearHead.from_params(params_exp),
            trace_exp, trace_mer, labels,
        )
    return TaskDriftAnalysis(
        task_index=task_index, records=records, growth=growth, propagation=propagation, output=output,
    )
