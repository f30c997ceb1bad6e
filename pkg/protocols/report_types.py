# featcal/protocols/report_types.py

from datetime import datetime, timezone
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field

METRIC_COLUMNS = ["run_id", "stage", "task", "layer", "metric", "value"]
DRIFT_COLUMNS = ["task", "layer", "sample", "e_norm", "m_norm", "p_norm", "cosine"]


class MetricRow(BaseModel):
    """One long-format metrics row; task/layer are None for run-level metrics."""
    run_id: str
    stage: str
    task: Optional[int] = None
    layer: Optional[int] = None
    metric: str
    value: float


class DriftRow(BaseModel):
    task: int
    layer: int
    sample: int
    e_norm: float
    m_norm: float
    p_norm: float
    cosine: float


class ArtifactRef(BaseModel):
    name: str
    path: str
    sha1: str
    kind: str = "file"
    size: int = 0


class PipelineManifest(BaseModel):
    run_id: str
    seed: int
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    updated_at: Optional[str] = None
    configs: Dict[str, Any] = Field(default_factory=dict)
    artifacts: Dict[str, ArtifactRef] = Field(default_factory=dict)

    def touch(self) -> None:
        self.updated_at = datetime.now(timezone.utc).isoformat()
