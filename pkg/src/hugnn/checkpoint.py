"""Checkpoint directory format.

`manifest.json` records parameter names and shapes, dtype/byte order, the
training seed, the hyperparameters, and the model dimensions; each
parameter lives in its own raw little-endian float64 binary file,
row-major, named `<param>.bin`.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .errors import DataError
from .model import HyperParams, ModelParams
from .rng import Rng

_FORMAT = "hugnn-checkpoint-v1"


def hyper_to_dict(hyper: HyperParams) -> dict:
    out = asdict(hyper)
    out["ablate"] = sorted(hyper.ablate)
    return out


def hyper_from_dict(data: dict) -> HyperParams:
    data = dict(data)
    data["ablate"] = frozenset(data.get("ablate", ()))
    return HyperParams(**data)


def save_checkpoint(params: ModelParams, hyper: HyperParams, seed: int,
                    path: str) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": _FORMAT,
        "dtype": "f64",
        "byte_order": "little-endian",
        "seed": int(seed),
        "hyperparameters": hyper_to_dict(hyper),
        "dims": {
            "d": params.d,
            "num_classes": params.num_classes,
            "hidden": params.hidden,
            "layers": params.layers,
            "m_communities": params.m_communities,
            "mlp_hidden": params.mlp_hidden,
        },
        "params": {name: list(t.shape) for name, t in sorted(params.tensors.items())},
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, t in params.tensors.items():
        with open(os.path.join(path, f"{name}.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, HyperParams, int]:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError("checkpoint is missing manifest.json", file=manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest.json is not valid JSON: {exc}",
                            file=manifest_path)
    if manifest.get("format") != _FORMAT:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}",
                        file=manifest_path)
    dims = manifest["dims"]
    params = ModelParams(d=dims["d"], num_classes=dims["num_classes"],
                         hidden=dims["hidden"], layers=dims["layers"],
                         m_communities=dims["m_communities"], rng=Rng(0),
                         mlp_hidden=dims["mlp_hidden"])
    declared = manifest["params"]
    names = set(params.tensors) | set(declared)
    for name in sorted(names):
        if name not in params.tensors:
            raise DataError(f"manifest declares unknown parameter '{name}'",
                            file=manifest_path)
        if name not in declared:
            raise DataError(f"manifest lacks parameter '{name}'", file=manifest_path)
        shape = tuple(declared[name])
        tensor = params.tensors[name]
        if shape != tensor.shape:
            raise DataError(f"parameter '{name}' has shape {shape} in manifest "
                            f"but the model expects {tensor.shape}",
                            file=manifest_path)
        bin_path = os.path.join(path, f"{name}.bin")
        if not os.path.isfile(bin_path):
            raise DataError(f"checkpoint is missing '{name}.bin'", file=bin_path)
        raw = np.fromfile(bin_path, dtype="<f8")
        if raw.size != shape[0] * shape[1]:
            raise DataError(f"'{name}.bin' holds {raw.size} values; expected "
                            f"{shape[0] * shape[1]}", file=bin_path)
        tensor.data = np.ascontiguousarray(raw.reshape(shape))
    hyper = hyper_from_dict(manifest["hyperparameters"])
    return params, hyper, int(manifest["seed"])
