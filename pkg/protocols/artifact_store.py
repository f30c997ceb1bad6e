# featcal/protocols/artifact_store.py

import hashlib
import json
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

from loguru import logger
from tenacity import retry, retry_if_exception, stop_after_attempt, wait_fixed

from core.errors import ArtifactError, ManifestError
from core.layer_spec import ModelSpec
from core.parameters import ParameterSet
from protocols.dataset_format import dumps_suite, loads_suite
from protocols.model_format import dumps_model, loads_model
from protocols.report_types import ArtifactRef, PipelineManifest
from tasks.task_suite import TaskDataset

MANIFEST_NAME = "manifest.json"


def _transient(error: BaseException) -> bool:
    return isinstance(error, OSError) and not isinstance(
        error, (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError)
    )


io_retry = retry(stop=stop_after_attempt(3), wait=wait_fixed(0.5), retry=retry_if_exception(_transient), reraise=True)


def blob_hash(data: bytes) -> str:
    """Git-style blob hash: sha1(b"blob <len>\\0" + data)."""
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


class ArtifactStore:
    """Text artifacts under one run directory, hashed as they are written."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        logger.debug(f"ArtifactStore rooted at {self.root}")

    def path(self, name: str) -> Path:
        return self.root / name

    @io_retry
    def _write_bytes(self, target: Path, data: bytes) -> None:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)

    @io_retry
    def _read_bytes(self, target: Path) -> bytes:
        return target.read_bytes()

    def write_text(self, name: str, text: str, kind: str = "file") -> ArtifactRef:
        data = text.encode("utf-8")
        target = self.path(name)
        try:
            self._write_bytes(target, data)
        except OSError as e:
            logger.error(f"Failed to write artifact {target}: {e}")
            raise ArtifactError(f"cannot write artifact: {e}", str(target)) from e
        logger.debug(f"Wrote {kind} artifact {name} ({len(data)} bytes)")
        return ArtifactRef(name=name, path=name, sha1=blob_hash(data), kind=kind, size=len(data))

    def read_text(self, name: str) -> str:
        target = self.path(name)
        try:
            return self._read_bytes(target).decode("utf-8")
        except OSError as e:
            raise ArtifactError(f"cannot read artifact: {e}", str(target)) from e

    def write_json(self, name: str, payload: Any, kind: str = "json") -> ArtifactRef:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", kind)

    def read_json(self, name: str) -> Any:
        text = self.read_text(name)
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"invalid JSON: {e}", str(self.path(name))) from e

    def save_model(self, name: str, params: ParameterSet, spec: ModelSpec) -> ArtifactRef:
        return self.write_text(name, dumps_model(params, spec), kind="model")

    def load_model(self, name: str) -> Tuple[ModelSpec, ParameterSet]:
        return loads_model(self.read_text(name))

    def save_suite(self, name: str, suite: List[TaskDataset]) -> ArtifactRef:
        return self.write_text(name, dumps_suite(suite), kind="dataset")

    def load_suite(self, name: str) -> List[TaskDataset]:
        return loads_suite(self.read_text(name))

    def save_manifest(self, manifest: PipelineManifest) -> None:
        manifest.touch()
        self.write_text(MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n", kind="manifest")

    def load_manifest(self) -> Optional[PipelineManifest]:
        if not self.path(MANIFEST_NAME).exists():
            return None
        try:
            return PipelineManifest.model_validate_json(self.read_text(MANIFEST_NAME))
        except ValueError as e:
            raise ManifestError(f"manifest is malformed: {e}") from e

    def verify(self, manifest: PipelineManifest) -> None:
        """Every referenced artifact exists, hashes match, models decode."""
        for key, ref in manifest.artifacts.items():
            target = self.path(ref.path)
            if not target.exists():
                raise ManifestError(f"artifact '{key}' is missing at {target}")
            data = self._read_bytes(target)
            actual = blob_hash(data)
            if actual != ref.sha1:
                raise ManifestError(f"artifact '{key}' hash mismatch: manifest {ref.sha1}, file {actual}")
            if ref.kind == "model":
                try:
                    loads_model(data.decode("utf-8"))
                except ArtifactError as e:
                    raise ManifestError(f"artifact '{key}' does not decode: {e}") from e
        logger.info(f"Manifest verified: {len(manifest.artifacts)} artifacts")
