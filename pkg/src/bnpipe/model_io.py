"""JSON model files.

Floats are written with ``repr`` precision, so loading reproduces the raw
parameters bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .neat import CoupledNeatModel, NeatModel
from .tensor_core import CoupledCpModel, CpModel

FORMAT = "bnpipe-model"
VERSION = 1

KINDS = {"cpd": CpModel, "coupled-cpd": CoupledCpModel, "neat": NeatModel,
         "coupled-neat": CoupledNeatModel}


def kind_of(model) -> str:
    for kind, cls in KINDS.items():
        if type(model) is cls:
            return kind
    raise ConfigError(f"cannot serialise {type(model).__name__}")


def _head_output(model) -> str:
    if isinstance(model, NeatModel):
        return model.heads.output
    if isinstance(model, CoupledNeatModel):
        return model.heads_x.output
    return "identity"


def model_to_dict(model) -> dict:
    kind = kind_of(model)
    params = model.params()
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "nonneg_map": model.nonneg_map,
        "rank": model.rank,
        "params": {k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()}
                   for k, v in sorted(params.items())},
    }
    if kind.startswith("coupled"):
        doc["shape_x"] = list(model.shape_x)
        doc["shape_y"] = list(model.shape_y)
    else:
        doc["shape"] = list(model.shape)
    if kind.endswith("neat"):
        doc["head_output"] = _head_output(model)
    return doc


def model_from_dict(doc: dict, path=None):
    if doc.get("format") != FORMAT:
        raise ParseError(f"not a {FORMAT} file", None, path)
    if doc.get("version") != VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')!r}", None, path)
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ParseError(f"unknown model kind {kind!r}", None, path)
    try:
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad parameter block: {exc}", None, path) from None
    phi = doc["nonneg_map"]
    if kind == "cpd":
        return CpModel.from_params(params, phi)
    if kind == "coupled-cpd":
        return CoupledCpModel.from_params(params, phi)
    return KINDS[kind].from_params(params, phi, doc.get("head_output", "identity"))


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    return model_from_dict(doc, path)
