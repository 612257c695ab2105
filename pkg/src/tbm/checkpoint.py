"""JSON checkpoints for both models, tied to the preprocessing manifest by hash."""
from __future__ import annotations

import json

import numpy as np

from .anomaly import VaeModel, VaeModelConfig
from .errors import IntegrityError, SchemaMismatch
from .nn import Parameter
from .rate import RateModel, RateModelConfig

FORMAT_VERSION = 1


def dumps_checkpoint(model: RateModel | VaeModel, manifest_hash: str) -> str:
    if isinstance(model, RateModel):
        kind, input_dim = "rate", model.input_dim
    else:
        kind, input_dim = "anomaly", {"excavation": model.d_exc, "geology": model.d_geo}
    doc = {
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "config": model.config.to_dict(),
        "input_dim": input_dim,
        "manifest_hash": manifest_hash,
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.params.items()
        ],
    }
    # json writes floats with repr, so values round-trip exactly
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(path, model: RateModel | VaeModel, manifest_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(model, manifest_hash))


def load_checkpoint(path, expected_kind: str, manifest_hash: str | None = None) -> RateModel | VaeModel:
    """Rebuild a model; raises IntegrityError when the manifest hash differs."""
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("format_version", "model_kind", "config", "input_dim", "manifest_hash", "params"):
        if key not in doc:
            raise SchemaMismatch(key, path)
    if doc["format_version"] != FORMAT_VERSION:
        raise SchemaMismatch("format_version", path)
    if doc["model_kind"] != expected_kind:
        raise IntegrityError(f"{path} holds a {doc['model_kind']} model, expected {expected_kind}")
    if manifest_hash is not None and doc["manifest_hash"] != manifest_hash:
        raise IntegrityError(f"{path} was trained on a different preprocessing manifest")
    params = {
        p["name"]: Parameter(np.array(p["data"], dtype=np.float64).reshape(p["shape"]), p["name"])
        for p in doc["params"]
    }
    if expected_kind == "rate":
        return RateModel(RateModelConfig.from_dict(doc["config"]), doc["input_dim"], params)
    dims = doc["input_dim"]
    return VaeModel(VaeModelConfig.from_dict(doc["config"]), dims["excavation"], dims["geology"], params)
