# featcal/tasks/task_suite.py

from typing import List, Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt, field_validator, model_validator
from scipy.linalg import expm

Split = Literal["train", "calibration", "test"]

# distinct RNG stream per split keeps calibration and test disjoint by construction
_SPLIT_STREAMS = {"train": 1, "calibration": 2, "test": 3}


class SuiteConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_tasks: PositiveInt = 8
    input_dim: PositiveInt = 64
    classes_per_task: PositiveInt = 4
    train_samples: PositiveInt = 512
    calibration_samples: PositiveInt = 256
    test_samples: PositiveInt = 512
    pretrain_samples: PositiveInt = 1024
    seed: int = 0
    shift_magnitude: NonNegativeFloat = 3.0
    cluster_std: PositiveFloat = 0.5
    prototype_scale: PositiveFloat = 1.5

    def samples_for(self, split: Split) -> int:
        return {
            "train": self.train_samples,
            "calibration": self.calibration_samples,
            "test": self.test_samples,
        }[split]


class TaskDataset(BaseModel):
    """One split of one task: features d0 x M, integer labels in [0, K)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    task_index: int
    split: Split
    num_classes: PositiveInt
    features: np.ndarray
    labels: np.ndarray

    @field_validator("features", mode="before")
    @classmethod
    def _as_float(cls, value) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    @field_validator("labels", mode="before")
    @classmethod
    def _as_int(cls, value) -> np.ndarray:
        return np.asarray(value, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def _check(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be d x M and labels a length-M vector")
        if self.features.shape[1] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    @property
    def num_samples(self) -> int:
        return self.features.shape[1]

    def head(self, count: int) -> "TaskDataset":
        """The first `count` samples (calibration budgets)."""
        return TaskDataset(
            task_index=self.task_index,
            split=self.split,
            num_classes=self.num_classes,
            features=self.features[:, :count],
            labels=self.labels[:count],
        )


def _task_geometry(config: SuiteConfig, task_index: int):
    """Orthogonal rotation and mean shift of task `task_index`."""
    rng = np.random.default_rng([config.seed, task_index, 0])
    d = config.input_dim
    raw = rng.standard_normal((d, d))
    skew = (raw - raw.T) / (2.0 * np.sqrt(d))
    shift = rng.standard_normal(d) / np.sqrt(d)
    if config.shift_magnitude == 0.0:
        return np.eye(d), np.zeros(d)
    return expm(config.shift_magnitude * skew), config.shift_magnitude * shift


def _prototypes(config: SuiteConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 10_000])
    return config.prototype_scale * rng.standard_normal((config.input_dim, config.classes_per_task))


def _draw(config: SuiteConfig, centres: np.ndarray, task: int, split: Split, rng: np.random.Generator, count: int) -> TaskDataset:
    labels = rng.integers(0, config.classes_per_task, size=count)
    noise = config.cluster_std * rng.standard_normal((config.input_dim, count))
    return TaskDataset(
        task_index=task,
        split=split,
        num_classes=config.classes_per_task,
        features=centres[:, labels] + noise,
        labels=labels,
    )


def make_task_suite(config: SuiteConfig) -> List[TaskDataset]:
    """Gaussian-cluster tasks sharing prototypes, each rotated and shifted.

    Returns N x 3 datasets ordered by task, then train/calibration/test.
    """
    prototypes = _prototypes(config)
    suite: List[TaskDataset] = []
    for task in range(config.num_tasks):
        rotation, shift = _task_geometry(config, task)
        centres = rotation @ prototypes + shift[:, None]
        for split, stream in _SPLIT_STREAMS.items():
            rng = np.random.default_rng([config.seed, task, stream])
            suite.append(_draw(config, centres, task, split, rng, config.samples_for(split)))
    logger.info(
        f"Generated task suite: {config.num_tasks} tasks x {config.classes_per_task} classes, "
        f"d0={config.input_dim}, shift={config.shift_magnitude}, seed={config.seed}"
    )
    return suite


def make_pretrain_set(config: SuiteConfig) -> TaskDataset:
    """Shared pretraining data: the unrotated, unshifted prototypes.

    The base learns this common problem; experts then adapt it to their own
    rotated task. Tagged task_index -1 so it never collides with a task.
    """
    rng = np.random.default_rng([config.seed, 20_000])
    return _draw(config, _prototypes(config), -1, "train", rng, config.pretrain_samples)


def split_of(suite: List[TaskDataset], task_index: int, split: Split) -> TaskDataset:
    for dataset in suite:
        if dataset.task_index == task_index and dataset.split == split:
            return dataset
    raise KeyError(f"no {split} split for task {task_index}")


def splits(suite: List[TaskDataset], split: Split) -> List[TaskDataset]:
    return sorted((d for d in suite if d.split == split), key=lambda d: d.task_index)
