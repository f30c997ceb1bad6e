# featcal/protocols/dataset_format.py

import json
from typing import Any, Dict, List

from pydantic import ValidationError

from core.errors import ArtifactError
from tasks.task_suite import TaskDataset


def encode_dataset(dataset: TaskDataset) -> Dict[str, Any]:
    return {
        "task_index": dataset.task_index,
        "split": dataset.split,
        "num_classes": dataset.num_classes,
        "features": dataset.features.tolist(),
        "labels": dataset.labels.tolist(),
    }


def decode_dataset(document: Dict[str, Any]) -> TaskDataset:
    try:
        if "num_classes" not in document:
            document = {**document, "num_classes": int(max(document["labels"], default=0)) + 1}
        return TaskDataset.model_validate(document)
    except (KeyError, ValidationError) as e:
        raise ArtifactError(f"malformed dataset document: {e}") from e


def dumps_suite(suite: List[TaskDataset]) -> str:
    return json.dumps([encode_dataset(d) for d in suite], separators=(",", ":"), allow_nan=False)


def loads_suite(text: str) -> List[TaskDataset]:
    try:
        documents = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"dataset file is not valid JSON: {e}") from e
    if isinstance(documents, dict):
        documents = [documents]
    return [decode_dataset(doc) for doc in documents]
