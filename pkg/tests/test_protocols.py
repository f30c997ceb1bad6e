# featcal/tests/test_protocols.py

import json
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pandas as pd
import pytest

from analysis.drift_analysis import decompose_all
from core.errors import ArtifactError, ManifestError
from core.model_engine import forward_trace
from core.parameters import Role
from pipeline.report_writer import drift_rows, emit_report, metric_frame, read_metrics, summarize, to_csv_text
from protocols.artifact_store import ArtifactStore, blob_hash
from protocols.model_format import dumps_model, loads_model
from protocols.report_types import DRIFT_COLUMNS, METRIC_COLUMNS, DriftRow, MetricRow, PipelineManifest
from tasks.task_suite import SuiteConfig, make_task_suite
from tests.helpers import perturbed, random_batch, random_model, residual_spec


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "run")


@pytest.fixture
def model():
    spec = residual_spec()
    return spec, random_model(spec, seed=17)


def test_model_round_trip_is_bit_exact(model):
    spec, params = model
    loaded_spec, loaded = loads_model(dumps_model(params, spec))
    assert loaded_spec == spec
    assert loaded.role == params.role
    assert loaded.same_values(params)


def test_expert_role_survives_round_trip(model):
    spec, params = model
    expert = params.with_role(Role.expert(4))
    _, loaded = loads_model(dumps_model(expert, spec))
    assert loaded.role == Role.expert(4)


def test_model_decoding_errors(model):
    spec, params = model
    with pytest.raises(ArtifactError):
        loads_model("{not json")
    document = json.loads(dumps_model(params, spec))
    document["schema_version"] = 999
    with pytest.raises(ArtifactError):
        loads_model(json.dumps(document))


def test_blob_hash_matches_git():
    assert blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_store_hashes_what_it_writes(store):
    ref = store.write_text("nested/a.txt", "payload\n")
    assert ref.sha1 == blob_hash(b"payload\n")
    assert ref.size == 8
    assert store.read_text("nested/a.txt") == "payload\n"


def test_missing_artifact_is_an_artifact_error(store):
    with pytest.raises(ArtifactError):
        store.read_text("nope.json")


def test_suite_round_trip(store):
    suite = make_task_suite(SuiteConfig(num_tasks=2, input_dim=3, classes_per_task=2, train_samples=5,
                                        calibration_samples=4, test_samples=3, seed=1))
    store.save_suite("suite.json", suite)
    loaded = store.load_suite("suite.json")
    for a, b in zip(suite, loaded):
        assert (a.task_index, a.split, a.num_classes) == (b.task_index, b.split, b.num_classes)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_manifest_verification(store, model):
    spec, params = model
    manifest = PipelineManifest(run_id="seed-1", seed=1)
    manifest.artifacts["merged"] = store.save_model("models/merged.json", params, spec)
    manifest.artifacts["notes"] = store.write_text("notes.txt", "ok\n")
    store.save_manifest(manifest)

    reloaded = store.load_manifest()
    assert reloaded.artifacts.keys() == manifest.artifacts.keys()
    assert reloaded.updated_at is not None
    store.verify(reloaded)

    store.path("notes.txt").write_text("tampered\n")
    with pytest.raises(ManifestError):
        store.verify(reloaded)

    store.path("notes.txt").unlink()
    with pytest.raises(ManifestError):
        store.verify(reloaded)


def test_missing_manifest_loads_as_none(store):
    assert store.load_manifest() is None
    store.write_text("manifest.json", "{}")
    with pytest.raises(ManifestError):
        store.load_manifest()


def _rows():
    return [
        MetricRow(run_id="seed-0", stage="eval", task=0, metric="accuracy", value=0.5),
        MetricRow(run_id="seed-0", stage="eval", task=0, metric="accuracy", value=0.7),
        MetricRow(run_id="seed-0", stage="eval", task=1, metric="accuracy", value=1 / 3),
        MetricRow(run_id="seed-0", stage="drift", task=1, layer=3, metric="e_norm", value=float("nan")),
        MetricRow(run_id="seed-0", stage="merge", metric="task_vector_cosine", value=0.25),
    ]


def test_metrics_csv_parses_back_exactly():
    text = to_csv_text(metric_frame(_rows()))
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert "\r" not in text
    frame = read_metrics(text)
    assert frame["value"].iloc[2] == 1 / 3
    assert pd.isna(frame["value"].iloc[3])
    assert pd.isna(frame["task"].iloc[4]) and pd.isna(frame["layer"].iloc[0])
    assert frame["layer"].iloc[3] == 3


def test_summary_macro_averages():
    summary = summarize(_rows())
    assert summary["macro_average"]["eval/accuracy"] == pytest.approx((0.6 + 1 / 3) / 2)
    assert summary["macro_average"]["drift/e_norm"] is None
    assert summary["run_level"] == {"merge/task_vector_cosine": 0.25}
    assert summary["drift_by_layer"] == {}


def test_drift_rows_and_report_files(store):
    spec = residual_spec()
    expert = random_model(spec, seed=2)
    merged = perturbed(expert, 0.1, seed=3, role=Role.merged())
    batch = random_batch(4, 5, seed=1)
    records = decompose_all(merged, expert, spec, forward_trace(expert, spec, batch), forward_trace(merged, spec, batch))
    rows = drift_rows(2, records)
    assert len(rows) == 6 * 5
    assert {r.task for r in rows} == {2}

    refs = emit_report(store, "drift_merged", _rows(), rows)
    assert set(refs) == {"drift_merged_metrics", "drift_merged_drift", "drift_merged_summary"}
    drift_text = store.read_text("drift_merged_drift.csv")
    assert drift_text.splitlines()[0] == ",".join(DRIFT_COLUMNS)
    assert len(drift_text.splitlines()) == 31
    summary = store.read_json("drift_merged_summary.json")
    assert set(summary["drift_by_layer"]) == {str(layer) for layer in range(1, 7)}


def test_empty_reports_have_headers_only(store):
    refs = emit_report(store, "empty", [], [])
    assert store.read_text("empty_metrics.csv") == ",".join(METRIC_COLUMNS) + "\n"
    assert store.read_text("empty_drift.csv") == ",".join(DRIFT_COLUMNS) + "\n"
    assert "empty_drift" in refs
    assert "nothing_drift" not in emit_report(store, "nothing", [])


def test_drift_row_fields():
    row = DriftRow(task=0, layer=1, sample=2, e_norm=0.1, m_norm=0.2, p_norm=0.3, cosine=0.9)
    assert list(row.model_dump()) == DRIFT_COLUMNS


def test_transient_write_errors_are_retried(store):
    calls = {"count": 0}
    original = Path.write_bytes

    def flaky(self, data):
        calls["count"] += 1
        if calls["count"] < 3:
            raise OSError("device busy")
        return original(self, data)

    with patch.object(Path, "write_bytes", flaky):
        ref = store.write_text("retry.txt", "ok\n")
    assert calls["count"] == 3
    assert ref.sha1 == blob_hash(b"ok\n")


def test_persistent_write_errors_become_artifact_errors(store):
    with patch.object(Path, "write_bytes", MagicMock(side_effect=OSError("disk full"))) as write:
        with pytest.raises(ArtifactError):
            store.write_text("never.txt", "x")
    assert write.call_count == 3
