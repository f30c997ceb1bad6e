# featcal/tests/test_pipeline.py

import asyncio
import json
import shutil

import numpy as np
import pytest
import yaml

from config.settings import DEFAULT_CONFIG_PATH, settings
from core.errors import ArtifactError, ConfigError, ManifestError, StageError
from pipeline.orchestrator import STAGES, FeatCalPipeline, PipelineConfig, load_pipeline_config
from pipeline.report_writer import read_metrics
from scripts.featcal_cli import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_MANIFEST,
    EXIT_OK,
    apply_flag_overrides,
    build_parser,
    exit_code_for,
    main,
)

SMALL_EXPERIMENT = {
    "suite": {
        "num_tasks": 8, "input_dim": 6, "classes_per_task": 3,
        "train_samples": 90, "calibration_samples": 48, "test_samples": 60, "pretrain_samples": 240,
    },
    "model": {
        "input_dim": 6,
        "layers": [
            {"kind": "linear", "in_dim": 6, "out_dim": 10},
            {"kind": "activation", "function": "tanh"},
            {"kind": "residual", "inner": [
                {"kind": "layernorm", "dim": 10},
                {"kind": "linear", "in_dim": 10, "out_dim": 10},
                {"kind": "activation", "function": "tanh"},
                {"kind": "linear", "in_dim": 10, "out_dim": 10},
            ]},
            {"kind": "layernorm", "dim": 10},
            {"kind": "linear", "in_dim": 10, "out_dim": 8},
            {"kind": "activation", "function": "tanh"},
        ],
        "head": {"kind": "linear", "in_dim": 8, "out_dim": 3},
    },
    "training": {
        "pretrain": {"epochs": 120, "lr": 0.2, "momentum": 0.9},
        "finetune": {"epochs": 60, "lr": 0.05, "momentum": 0.9},
    },
    "merge": {"method": "task-arithmetic", "scale": 0.3, "head_mode": "task"},
    "calibration": {"lambda": 0.05, "rho": 2.0, "alpha": 0.3, "n": 48},
    "drift": {"nodes": 33, "propagation_samples": 2, "samples": 20},
    "sweep": {"lambda": [0.05], "alpha": [0.3], "rho": [1.0], "n": [16]},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "experiment.yaml"
    path.write_text(yaml.safe_dump(SMALL_EXPERIMENT))
    return path


@pytest.fixture(scope="module")
def finished_run(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--seed", "3", "--config", str(config_file), "--out", str(out), "--log-level", "WARNING"]) == EXIT_OK
    return out


def _macro(frame, metric):
    rows = frame[frame["metric"] == metric]
    return rows.groupby("task")["value"].mean().mean()


def test_config_loading(config_file):
    config = load_pipeline_config(config_file)
    assert config.suite.num_tasks == 8
    assert config.calibration.lam == 0.05
    assert config.sweep.lam == [0.05]
    seeded = config.with_seed(7)
    assert seeded.suite.seed == 7
    assert seeded.training.pretrain.seed == 7 and seeded.training.finetune.seed == 1007


def test_head_must_match_classes(tmp_path):
    bad = json.loads(json.dumps(SMALL_EXPERIMENT))
    bad["suite"]["classes_per_task"] = 4
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad))
    with pytest.raises(ConfigError):
        load_pipeline_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_pipeline_config(tmp_path / "absent.yaml")


def test_full_run_writes_every_artifact(finished_run):
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert manifest["run_id"] == "seed-3"
    for key in ["suite", "pretrain", "base", "merged", "calibrated", "calibration_log", "expert_0", "expert_7",
                "drift_merged_drift", "drift_calibrated_summary", "eval_metrics", "metrics"]:
        assert key in manifest["artifacts"], key
    assert manifest["configs"]["calibration"]["lambda"] == 0.05
    log = json.loads((finished_run / "calibration_log.json").read_text())
    assert all("wall_time_s" not in layer for layer in log["layers"])


def test_experts_improve_on_their_tasks(finished_run):
    frame = read_metrics((finished_run / "metrics.csv").read_text())
    assert _macro(frame, "expert.train_loss") < _macro(frame, "base.train_loss")


def test_calibration_reduces_drift(finished_run):
    frame = read_metrics((finished_run / "metrics.csv").read_text())
    merged_drift = _macro(frame, "merged.final_drift")
    assert merged_drift > 0
    assert _macro(frame, "calibrated.final_drift") < merged_drift


@pytest.fixture(scope="module")
def benchmark_metrics(tmp_path_factory):
    """Default experiment (8 tasks, lambda 0.05, rho 2, alpha 0.3, n 256) at seed 0."""
    out = tmp_path_factory.mktemp("benchmark")
    pipeline = FeatCalPipeline(load_pipeline_config(DEFAULT_CONFIG_PATH), 0, out)
    asyncio.run(pipeline.run(("gen-tasks", "train", "merge", "calibrate", "eval")))
    return read_metrics((out / "metrics.csv").read_text())


def _per_task(frame, metric):
    return frame[frame["metric"] == metric].set_index("task")["value"]


def test_benchmark_runs_the_default_calibration(benchmark_metrics):
    config = load_pipeline_config(DEFAULT_CONFIG_PATH)
    assert config.suite.num_tasks == 8
    assert (config.calibration.lam, config.calibration.rho, config.calibration.alpha, config.calibration.n) == (0.05, 2.0, 0.3, 256)
    assert set(benchmark_metrics["task"].dropna()) == set(range(8))


def test_benchmark_experts_beat_the_base_on_their_own_task(benchmark_metrics):
    expert_loss = _per_task(benchmark_metrics, "expert.train_loss")
    base_loss = _per_task(benchmark_metrics, "base.train_loss")
    assert (expert_loss < base_loss).all()
    assert _macro(benchmark_metrics, "expert.train_accuracy") > _macro(benchmark_metrics, "base.train_accuracy")


def test_benchmark_calibration_cuts_final_drift(benchmark_metrics):
    merged_drift = _macro(benchmark_metrics, "merged.final_drift")
    calibrated_drift = _macro(benchmark_metrics, "calibrated.final_drift")
    assert merged_drift > 0
    assert 1.0 - calibrated_drift / merged_drift >= 0.25


def test_benchmark_calibration_keeps_accuracy(benchmark_metrics):
    assert _macro(benchmark_metrics, "calibrated.accuracy") >= _macro(benchmark_metrics, "merged.accuracy")


def test_drift_diagnostics_hold(finished_run):
    frame = read_metrics((finished_run / "metrics.csv").read_text())
    for name in ("merged", "calibrated"):
        assert (frame[frame["metric"] == f"{name}.score_bound_holds"]["value"] == 1.0).all()
        assert (frame[frame["metric"] == f"{name}.margin_misfires"]["value"] == 0.0).all()
        assert (frame[frame["metric"] == f"{name}.loss_identity_residual"]["value"] <= 1e-8).all()
        assert (frame[frame["metric"] == f"{name}.growth_violations"]["value"] == 0.0).all()


def test_metrics_table_is_ordered_by_stage(finished_run):
    frame = read_metrics((finished_run / "metrics.csv").read_text())
    order = [stage for stage in STAGES if stage in set(frame["stage"])]
    assert list(dict.fromkeys(frame["stage"])) == order
    assert set(frame["run_id"]) == {"seed-3"}


def test_same_seed_gives_identical_metrics(config_file, finished_run, tmp_path):
    out = tmp_path / "again"
    assert main(["pipeline", "--seed", "3", "--config", str(config_file), "--out", str(out), "--log-level", "WARNING"]) == EXIT_OK
    assert (out / "metrics.csv").read_bytes() == (finished_run / "metrics.csv").read_bytes()
    assert (out / "models" / "calibrated.json").read_bytes() == (finished_run / "models" / "calibrated.json").read_bytes()


@pytest.mark.asyncio
async def test_stages_can_run_one_at_a_time(config_file, finished_run, tmp_path):
    config = load_pipeline_config(config_file)
    out = tmp_path / "stepwise"
    pipeline = FeatCalPipeline(config, 3, out)
    await pipeline.run_stage("gen-tasks")
    with pytest.raises(StageError) as info:
        await pipeline.run_stage("merge")
    assert isinstance(info.value.cause, ArtifactError)

    resumed = FeatCalPipeline(config, 3, out)
    assert "suite" in resumed.manifest.artifacts
    with pytest.raises(ConfigError):
        await resumed.run_stage("deploy")

    changed = config.model_copy(update={"calibration": config.calibration.model_copy(update={"lam": 0.7})})
    refreshed = FeatCalPipeline(changed, 3, out)
    assert refreshed.manifest.configs["calibration"]["lambda"] == 0.7
    assert "suite" in refreshed.manifest.artifacts


@pytest.mark.asyncio
async def test_sweep_stage(config_file, finished_run, tmp_path):
    out = tmp_path / "sweep"
    shutil.copytree(finished_run, out)
    pipeline = FeatCalPipeline(load_pipeline_config(config_file), 3, out)
    await pipeline.run_stage("sweep")
    frame = read_metrics((out / "sweep_metrics.csv").read_text())
    labels = {metric.rsplit(".", 1)[0] for metric in frame["metric"]}
    assert labels == {"lam=0.05", "alpha=0.3", "rho=1", "n=16"}
    assert np.isfinite(frame["value"]).all()


def test_cli_exit_codes(config_file, finished_run, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("suite: {num_tasks: -1}\n")
    assert main(["gen-tasks", "--seed", "0", "--config", str(bad), "--out", str(tmp_path / "a")]) == EXIT_CONFIG

    assert main(["merge", "--seed", "0", "--config", str(config_file), "--out", str(tmp_path / "b")]) == EXIT_ARTIFACT

    tampered = tmp_path / "tampered"
    shutil.copytree(finished_run, tampered)
    (tampered / "models" / "merged.json").write_text("{}")
    assert main(["eval", "--seed", "3", "--config", str(config_file), "--out", str(tampered)]) == EXIT_MANIFEST

    assert main(["calibrate", "--seed", "3", "--config", str(config_file), "--out", str(tmp_path / "c"),
                 "--alpha", "1.5"]) == EXIT_CONFIG


def test_exit_code_mapping():
    assert exit_code_for(StageError("merge", ArtifactError("gone"))) == EXIT_ARTIFACT
    assert exit_code_for(ManifestError("bad hash")) == EXIT_MANIFEST
    assert exit_code_for(RuntimeError("boom")) == 1


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["calibrate", "--help"])
    assert info.value.code == 0
    assert "exit codes:" in capsys.readouterr().out


def test_seed_is_required():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["train"])
    assert info.value.code == 2


def test_flag_overrides_reach_the_config(config_file):
    args = build_parser().parse_args(["pipeline", "--seed", "1", "--lambda", "0.5", "--epsilon", "1e-10",
                                      "--bias", "off", "--layernorm", "on", "--method", "average"])
    config = apply_flag_overrides(load_pipeline_config(config_file), args)
    assert isinstance(config, PipelineConfig)
    assert config.calibration.lam == 0.5
    assert config.calibration.epsilon == 1e-10
    assert config.calibration.calibrate_bias is False
    assert config.calibration.calibrate_layernorm is True
    assert config.merge.method == "average"

    untouched = apply_flag_overrides(load_pipeline_config(config_file), build_parser().parse_args(["calibrate", "--seed", "1"]))
    assert untouched.calibration == load_pipeline_config(config_file).calibration


def test_switch_flags_take_on_or_off():
    args = build_parser().parse_args(["calibrate", "--seed", "1", "--layernorm", "off"])
    assert args.layernorm == "off" and args.bias is None
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["calibrate", "--seed", "1", "--bias", "maybe"])
    assert info.value.code == 2


def test_settings_read_single_sections(config_file):
    section = settings.load_section("calibration", str(config_file))
    assert section["lambda"] == 0.05
    assert settings.load_section("plotting", str(config_file)) is None
    assert settings.load_section("calibration", str(config_file) + ".missing") is None
