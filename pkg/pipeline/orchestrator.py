# featcal/pipeline/orchestrator.py
#
# Stage driver: gen-tasks -> train -> merge -> calibrate -> drift-report -> eval,
# plus the sensitivity sweep. Every stage reads its inputs from and writes its
# outputs to one ArtifactStore, so stages can run together or one at a time.

import inspect
from pathlib import Path
from typing import Awaitable, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt

from analysis.drift_analysis import column_cosine
from analysis.task_analysis import analyze_task
from config.settings import settings
from core.errors import ArtifactError, ConfigError, StageError
from core.layer_spec import ModelSpec
from core.model_engine import build_model, forward_trace
from core.parameters import ParameterSet, Role
from featcal.calib_config import CalibConfig
from featcal.calibrator import calibrate as calibrate_model
from merging.mergers import MergeConfig, merge as merge_models, task_vector_cosine, with_task_head
from pipeline.report_writer import drift_rows, emit_report, metric_frame, to_csv_text
from protocols.artifact_store import ArtifactStore
from protocols.report_types import METRIC_COLUMNS, DriftRow, MetricRow, PipelineManifest
from tasks.task_suite import SuiteConfig, TaskDataset, make_pretrain_set, make_task_suite, splits
from tasks.trainer import TrainConfig, evaluate, train_experts_concurrently, train_model
from utils.validators import validate_dict_with_pydantic_model

STAGES: Tuple[str, ...] = ("gen-tasks", "train", "merge", "calibrate", "drift-report", "eval")
SWEEP_FACTORS: Tuple[str, ...] = ("lam", "alpha", "rho", "n")


class TrainingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    pretrain: TrainConfig = TrainConfig(epochs=300, lr=0.2, momentum=0.9)
    finetune: TrainConfig = TrainConfig(epochs=150, lr=0.1, momentum=0.9)


class DriftConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    nodes: PositiveInt = 33
    propagation_samples: NonNegativeInt = 8
    samples: PositiveInt = 128     # test columns per task used for drift diagnostics


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: List[float] = Field(default_factory=lambda: [1e-5, 0.05, 3.0], alias="lambda")
    alpha: List[float] = Field(default_factory=lambda: [0.0, 0.3, 0.6, 1.0])
    rho: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    n: List[int] = Field(default_factory=lambda: [16, 64, 256])


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    suite: SuiteConfig = SuiteConfig()
    model: ModelSpec
    training: TrainingConfig = TrainingConfig()
    merge: MergeConfig = MergeConfig()
    calibration: CalibConfig = CalibConfig()
    drift: DriftConfig = DriftConfig()
    sweep: SweepConfig = SweepConfig()

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Derives every RNG seed of the run from one integer."""
        training = TrainingConfig(
            pretrain=self.training.pretrain.model_copy(update={"seed": seed}),
            finetune=self.training.finetune.model_copy(update={"seed": seed + 1000}),
        )
        return self.model_copy(update={"suite": self.suite.model_copy(update={"seed": seed}), "training": training})


def load_pipeline_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    data = settings.load_config(str(path) if path is not None else None)
    if data is None:
        raise ConfigError(f"cannot load experiment config from {path or settings.CONFIG_PATH}")
    config = validate_dict_with_pydantic_model(data, PipelineConfig)
    config.model.check()
    if config.model.head is None:
        raise ConfigError("the pipeline needs a model with a classification head")
    if config.model.head.out_dim != config.suite.classes_per_task:
        raise ConfigError(
            f"head emits {config.model.head.out_dim} scores but tasks have {config.suite.classes_per_task} classes"
        )
    return config


class FeatCalPipeline:
    """One run directory, one seed. Stage outputs are recorded in the manifest."""

    def __init__(self, config: PipelineConfig, seed: int, out_dir: Union[str, Path]):
        self.seed = seed
        self.config = config.with_seed(seed)
        self.store = ArtifactStore(out_dir)
        self.run_id = f"seed-{seed}"
        configs = self.config.model_dump(mode="json", by_alias=True)
        manifest = self.store.load_manifest()
        if manifest is not None and manifest.seed == seed:
            self.store.verify(manifest)
            logger.info(f"Resuming run {manifest.run_id} with {len(manifest.artifacts)} recorded artifacts")
            changed = sorted(k for k in configs if manifest.configs.get(k) != configs[k])
            if changed:
                logger.warning(f"Config sections changed since the last stage: {changed}; recording the new values")
                manifest.configs = configs
        else:
            if manifest is not None:
                logger.warning(f"Run directory held seed {manifest.seed}; starting a fresh manifest for seed {seed}")
            manifest = PipelineManifest(run_id=self.run_id, seed=seed, configs=configs)
        self.manifest = manifest
        self._handlers: Dict[str, Callable[[], Union[None, Awaitable[None]]]] = {
            "gen-tasks": self.gen_tasks,
            "train": self.train,
            "merge": self.merge,
            "calibrate": self.calibrate,
            "drift-report": self.drift_report,
            "eval": self.evaluation,
            "sweep": self.sweep,
        }

    # ---- stage plumbing ----

    async def run_stage(self, stage: str) -> None:
        if stage not in self._handlers:
            raise ConfigError(f"unknown stage '{stage}'; known: {list(self._handlers)}")
        logger.info(f"Stage '{stage}' started (run {self.run_id})")
        try:
            result = self._handlers[stage]()
            if inspect.isawaitable(result):
                await result
        except Exception as e:
            logger.error(f"Stage '{stage}' failed: {type(e).__name__}: {e}")
            self.store.save_manifest(self.manifest)
            raise StageError(stage, e) from e
        self.store.save_manifest(self.manifest)
        logger.info(f"Stage '{stage}' finished")

    async def run(self, stages: Sequence[str] = STAGES) -> PipelineManifest:
        for stage in stages:
            await self.run_stage(stage)
        self.store.verify(self.manifest)
        return self.manifest

    def _require(self, key: str) -> str:
        ref = self.manifest.artifacts.get(key)
        if ref is None:
            raise ArtifactError(f"artifact '{key}' is missing; run the stage that produces it first", str(self.store.root))
        return ref.path

    def _save_model(self, key: str, params: ParameterSet, spec: ModelSpec) -> None:
        self.manifest.artifacts[key] = self.store.save_model(f"models/{key}.json", params, spec)

    def _load_model(self, key: str) -> Tuple[ModelSpec, ParameterSet]:
        return self.store.load_model(self._require(key))

    def _load_suite(self) -> List[TaskDataset]:
        return self.store.load_suite(self._require("suite"))

    def _load_experts(self, count: int) -> List[ParameterSet]:
        return [self._load_model(f"expert_{i}")[1] for i in range(count)]

    def _row(self, stage: str, metric: str, value: float, task: Optional[int] = None, layer: Optional[int] = None) -> MetricRow:
        return MetricRow(run_id=self.run_id, stage=stage, task=task, layer=layer, metric=metric, value=float(value))

    def _write_stage_metrics(self, stage: str, rows: Sequence[MetricRow]) -> None:
        key = f"metrics_{stage}"
        self.manifest.artifacts[key] = self.store.write_text(f"metrics/{stage}.csv", to_csv_text(metric_frame(rows)), kind="csv")
        self._rebuild_metrics()

    def _rebuild_metrics(self) -> None:
        """metrics.csv is the stage CSVs concatenated in stage order."""
        lines = [",".join(METRIC_COLUMNS)]
        for stage in (*STAGES, "sweep"):
            ref = self.manifest.artifacts.get(f"metrics_{stage}")
            if ref is not None:
                lines.extend(line for line in self.store.read_text(ref.path).splitlines()[1:] if line)
        self.manifest.artifacts["metrics"] = self.store.write_text("metrics.csv", "\n".join(lines) + "\n", kind="csv")

    def _scorer(self, model: ParameterSet, expert: ParameterSet) -> ParameterSet:
        """The model that scores the expert's task: task head unless heads are merged."""
        if self.config.merge.head_mode == "task":
            return with_task_head(model, expert)
        return model

    # ---- stages ----

    def gen_tasks(self) -> None:
        suite = make_task_suite(self.config.suite)
        self.manifest.artifacts["suite"] = self.store.save_suite("suite.json", suite)
        self.manifest.artifacts["pretrain"] = self.store.save_suite("pretrain.json", [make_pretrain_set(self.config.suite)])
        rows = [
            self._row("gen-tasks", f"{dataset.split}_samples", dataset.num_samples, task=dataset.task_index)
            for dataset in suite
        ]
        self._write_stage_metrics("gen-tasks", rows)

    async def train(self) -> None:
        suite = self._load_suite()
        pretrain = self.store.load_suite(self._require("pretrain"))
        spec = self.config.model
        train_sets = splits(suite, "train")
        initial = build_model(spec, self.seed)
        base = train_model(initial, spec, pretrain, self.config.training.pretrain, role=Role.base())
        experts = await train_experts_concurrently(base, spec, train_sets, self.config.training.finetune)

        self._save_model("base", base, spec)
        rows = [self._row("train", "base.pretrain_accuracy", evaluate(base, spec, pretrain).accuracy)]
        for dataset, expert in zip(train_sets, experts):
            self._save_model(f"expert_{dataset.task_index}", expert, spec)
            own = evaluate(expert, spec, dataset)
            before = evaluate(base, spec, dataset)
            rows += [
                self._row("train", "base.train_loss", before.mean_loss, task=dataset.task_index),
                self._row("train", "base.train_accuracy", before.accuracy, task=dataset.task_index),
                self._row("train", "expert.train_loss", own.mean_loss, task=dataset.task_index),
                self._row("train", "expert.train_accuracy", own.accuracy, task=dataset.task_index),
            ]
        self._write_stage_metrics("train", rows)

    def merge(self) -> None:
        spec, base = self._load_model("base")
        experts = self._load_experts(self.config.suite.num_tasks)
        cfg = self.config.merge
        merged = merge_models(cfg.method, experts, base=base, scale=cfg.scale)
        self._save_model("merged", merged, spec)
        rows = [
            self._row("merge", "task_vector_cosine", task_vector_cosine(merged, base, expert), task=i)
            for i, expert in enumerate(experts)
        ]
        self._write_stage_metrics("merge", rows)

    def _calibration_sets(self, suite: List[TaskDataset]) -> List[np.ndarray]:
        return [dataset.features for dataset in splits(suite, "calibration")]

    def calibrate(self) -> None:
        suite = self._load_suite()
        spec, base = self._load_model("base")
        _, merged = self._load_model("merged")
        experts = self._load_experts(self.config.suite.num_tasks)
        calibrated, log = calibrate_model(merged, base, experts, spec, self._calibration_sets(suite), self.config.calibration)
        self._save_model("calibrated", calibrated, spec)
        # wall_time_s varies run to run; stored artifacts stay byte-identical per seed
        document = log.model_dump(mode="json", by_alias=True, exclude={"layers": {"__all__": {"wall_time_s"}}})
        self.manifest.artifacts["calibration_log"] = self.store.write_json("calibration_log.json", document)

        rows = []
        for entry in log.modules:
            for name in ("objective_before", "objective_after", "solve_residual", "distance_to_merged"):
                value = getattr(entry, name)
                if value is not None:
                    rows.append(self._row("calibrate", f"{entry.module_path}.{name}", value, layer=entry.layer_index))
        self._write_stage_metrics("calibrate", rows)

    def drift_report(self) -> None:
        suite = self._load_suite()
        spec, _ = self._load_model("base")
        experts = self._load_experts(self.config.suite.num_tasks)
        models = {"merged": self._load_model("merged")[1], "calibrated": self._load_model("calibrated")[1]}
        cfg = self.config.drift

        rows: List[MetricRow] = []
        for name, model in models.items():
            records: List[DriftRow] = []
            report_rows: List[MetricRow] = []
            for dataset in splits(suite, "test"):
                i = dataset.task_index
                batch = dataset.head(cfg.samples)
                k = min(cfg.propagation_samples, batch.num_samples)
                analysis = analyze_task(
                    i, self._scorer(model, experts[i]), experts[i], spec, batch.features, batch.labels,
                    nodes=cfg.nodes, propagation_samples=tuple(range(k)),
                )
                records.extend(drift_rows(i, analysis.records))
                for record in analysis.records:
                    report_rows.append(self._row("drift-report", f"{name}.e_norm", record.e_norm.mean(), task=i, layer=record.layer))
                    report_rows.append(self._row("drift-report", f"{name}.cosine", record.cosine_to_expert.mean(), task=i, layer=record.layer))
                report_rows.append(self._row("drift-report", f"{name}.final_drift", analysis.final_drift.mean(), task=i))
                report_rows.append(self._row(
                    "drift-report", f"{name}.growth_violations",
                    sum(1 for check in analysis.growth if check.condition_holds and not check.bound_holds), task=i,
                ))
                if analysis.propagation is not None:
                    report_rows.append(self._row("drift-report", f"{name}.propagation_error", analysis.propagation.relative_error, task=i))
                if analysis.output is not None:
                    out = analysis.output
                    report_rows += [
                        self._row("drift-report", f"{name}.score_bound_holds", float(out.bound_holds), task=i),
                        self._row("drift-report", f"{name}.margin_misfires", out.margin_misfires, task=i),
                        self._row("drift-report", f"{name}.margin_preserved", out.margin_preserved.mean(), task=i),
                        self._row("drift-report", f"{name}.loss_drift", out.loss_drift.mean(), task=i),
                        self._row("drift-report", f"{name}.loss_identity_residual", out.loss_identity_residual, task=i),
                    ]
            self.manifest.artifacts.update(emit_report(self.store, f"drift_{name}", report_rows, records))
            rows.extend(report_rows)
        self._write_stage_metrics("drift-report", rows)

    def evaluation(self) -> None:
        suite = self._load_suite()
        spec, base = self._load_model("base")
        experts = self._load_experts(self.config.suite.num_tasks)
        merged = self._load_model("merged")[1]
        calibrated = self._load_model("calibrated")[1]

        rows: List[MetricRow] = []
        for dataset in splits(suite, "test"):
            i = dataset.task_index
            expert = experts[i]
            scored = {
                "base": base,
                "expert": expert,
                "merged": self._scorer(merged, expert),
                "calibrated": self._scorer(calibrated, expert),
            }
            for name, model in scored.items():
                result = evaluate(model, spec, dataset)
                rows.append(self._row("eval", f"{name}.accuracy", result.accuracy, task=i))
                rows.append(self._row("eval", f"{name}.loss", result.mean_loss, task=i))
            h_exp = forward_trace(expert, spec, dataset.features).final
            for name in ("merged", "calibrated"):
                h = forward_trace(scored[name], spec, dataset.features).final
                rows.append(self._row("eval", f"{name}.feature_cosine", column_cosine(h, h_exp).mean(), task=i))
                rows.append(self._row("eval", f"{name}.final_drift", np.linalg.norm(h - h_exp, axis=0).mean(), task=i))
                rows.append(self._row("eval", f"{name}.task_vector_cosine", task_vector_cosine(scored[name], base, expert), task=i))
        self.manifest.artifacts.update(emit_report(self.store, "eval", rows))
        self._write_stage_metrics("eval", rows)

    def sweep(self) -> None:
        """Single-factor sensitivity sweeps around the configured calibration."""
        suite = self._load_suite()
        spec, base = self._load_model("base")
        merged = self._load_model("merged")[1]
        experts = self._load_experts(self.config.suite.num_tasks)
        calib_sets = self._calibration_sets(suite)
        tests = splits(suite, "test")
        default = self.config.calibration

        rows: List[MetricRow] = []
        for factor in SWEEP_FACTORS:
            for value in getattr(self.config.sweep, factor):
                cfg = CalibConfig.model_validate({**default.model_dump(), factor: value})
                calibrated, _ = calibrate_model(merged, base, experts, spec, calib_sets, cfg)
                label = f"{factor}={value:g}"
                for dataset in tests:
                    scorer = self._scorer(calibrated, experts[dataset.task_index])
                    result = evaluate(scorer, spec, dataset)
                    h = forward_trace(scorer, spec, dataset.features).final
                    h_exp = forward_trace(experts[dataset.task_index], spec, dataset.features).final
                    rows.append(self._row("sweep", f"{label}.accuracy", result.accuracy, task=dataset.task_index))
                    rows.append(self._row("sweep", f"{label}.final_drift",
                                          np.linalg.norm(h - h_exp, axis=0).mean(), task=dataset.task_index))
                logger.info(f"Sweep {label}: done")
        self.manifest.artifacts.update(emit_report(self.store, "sweep", rows))
        self._write_stage_metrics("sweep", rows)
