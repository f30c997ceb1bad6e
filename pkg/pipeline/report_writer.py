# featcal/pipeline/report_writer.py
#
# Long-format CSV tables and JSON summaries. Floats are printed with 17
# significant digits so a CSV re-parses to the exact in-memory values.

import math
from collections import defaultdict
from io import StringIO
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from analysis.drift_analysis import DriftRecord
from protocols.artifact_store import ArtifactStore
from protocols.report_types import DRIFT_COLUMNS, METRIC_COLUMNS, ArtifactRef, DriftRow, MetricRow

FLOAT_FORMAT = "%.17g"


def drift_rows(task_index: int, records: Sequence[DriftRecord]) -> List[DriftRow]:
    rows = []
    for record in records:
        for sample in range(record.e_norm.shape[0]):
            rows.append(DriftRow(
                task=task_index,
                layer=record.layer,
                sample=sample,
                e_norm=float(record.e_norm[sample]),
                m_norm=float(record.m_norm[sample]),
                p_norm=float(record.p_norm[sample]),
                cosine=float(record.cosine_to_expert[sample]),
            ))
    return rows


def metric_frame(rows: Sequence[MetricRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=METRIC_COLUMNS)
    for column in ("task", "layer"):
        frame[column] = frame[column].astype("Int64")
    frame["value"] = frame["value"].astype(np.float64)
    return frame


def drift_frame(rows: Sequence[DriftRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=DRIFT_COLUMNS)
    for column in ("task", "layer", "sample"):
        frame[column] = frame[column].astype(np.int64)
    return frame


def to_csv_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def summarize(metric_rows: Sequence[MetricRow], records: Sequence[DriftRow] = ()) -> Dict[str, Any]:
    """Macro averages: per (stage, metric), the mean over tasks of each task's value."""
    per_task: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    run_level: Dict[str, float] = {}
    for row in metric_rows:
        key = f"{row.stage}/{row.metric}"
        if row.task is None:
            run_level[key] = _finite_or_none(row.value)
        else:
            per_task[key][row.task].append(row.value)

    macro = {}
    for key, tasks in sorted(per_task.items()):
        task_means = [float(np.mean(values)) for _, values in sorted(tasks.items())]
        macro[key] = _finite_or_none(float(np.mean(task_means)))

    drift_by_layer: Dict[str, Dict[str, Optional[float]]] = {}
    if records:
        frame = drift_frame(records)
        grouped = frame.groupby("layer")[["e_norm", "m_norm", "p_norm", "cosine"]].mean()
        for layer, values in grouped.iterrows():
            drift_by_layer[str(layer)] = {name: _finite_or_none(float(v)) for name, v in values.items()}

    return {"macro_average": macro, "run_level": dict(sorted(run_level.items())), "drift_by_layer": drift_by_layer}


def emit_report(
    store: ArtifactStore,
    name: str,
    metric_rows: Sequence[MetricRow],
    records: Optional[Sequence[DriftRow]] = None,
) -> Dict[str, ArtifactRef]:
    """Writes `<name>_metrics.csv`, `<name>_drift.csv` (unless `records` is None)
    and `<name>_summary.json`. Empty inputs give header-only CSVs."""
    refs = {
        f"{name}_metrics": store.write_text(f"{name}_metrics.csv", to_csv_text(metric_frame(metric_rows)), kind="csv"),
    }
    if records is not None:
        refs[f"{name}_drift"] = store.write_text(f"{name}_drift.csv", to_csv_text(drift_frame(records)), kind="csv")
    refs[f"{name}_summary"] = store.write_json(f"{name}_summary.json", summarize(metric_rows, records or ()))
    logger.info(f"Report '{name}': {len(metric_rows)} metric rows, {len(records or ())} drift rows")
    return refs


def read_metrics(text: str) -> pd.DataFrame:
    frame = pd.read_csv(StringIO(text), dtype={"run_id": str, "stage": str, "metric": str, "value": np.float64})
    for column in ("task", "layer"):
        frame[column] = frame[column].astype("Int64")
    return frame
