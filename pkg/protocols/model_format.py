# featcal/protocols/model_format.py
#
# Model files: {"schema_version", "spec", "role", "entries"} with every matrix
# as row-major nested lists. Floats go through repr (shortest round-trip), so a
# dump/load cycle is bit-exact.

import json
from typing import Any, Dict, Tuple

import numpy as np
from loguru import logger
from pydantic import ValidationError

from core.errors import ArtifactError
from core.layer_spec import SCHEMA_VERSION, ModelSpec
from core.parameters import ParameterSet, Role


def encode_model(params: ParameterSet, spec: ModelSpec) -> Dict[str, Any]:
    params.check_against(spec)
    return {
        "schema_version": SCHEMA_VERSION,
        "spec": spec.model_dump(mode="json"),
        "role": params.role.model_dump(mode="json"),
        "entries": {key: params[key].tolist() for key in sorted(params.keys())},
    }


def decode_model(document: Dict[str, Any]) -> Tuple[ModelSpec, ParameterSet]:
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArtifactError(f"unsupported model schema_version {version!r}")
    try:
        spec = ModelSpec.model_validate(document["spec"])
        role = Role.model_validate(document["role"])
        entries = {key: np.asarray(value, dtype=np.float64) for key, value in document["entries"].items()}
    except (KeyError, ValidationError) as e:
        raise ArtifactError(f"malformed model document: {e}") from e
    params = ParameterSet(role=role, entries=entries)
    params.check_against(spec)
    return spec, params


def dumps_model(params: ParameterSet, spec: ModelSpec) -> str:
    return json.dumps(encode_model(params, spec), indent=None, separators=(",", ":"), allow_nan=False)


def loads_model(text: str) -> Tuple[ModelSpec, ParameterSet]:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"model file is not valid JSON: {e}") from e
    spec, params = decode_model(document)
    logger.debug(f"Decoded {params.role} model with {len(params.keys())} entries")
    return spec, params
