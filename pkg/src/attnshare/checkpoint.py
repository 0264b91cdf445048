"""Checkpoint format: a JSON manifest plus a raw little-endian float blob.

The manifest carries the architecture, the sharing configuration, a named
tensor directory (name -> shape/dtype/offset/bytes into the companion
blob), a per-layer "lisa" block for sharing-module parameters, and training
provenance. Offsets are contiguous and must tile the blob exactly.
Save -> load -> save reproduces both files byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, SharingConfig
from .errors import InputError
from .model import LayerWeights, Model, ModelWeights
from .sharing import LisaParams
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST_NAME = "model.json"
BLOB_NAME = "model.bin"

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def _entry(arr: np.ndarray, offset: int) -> dict:
    dtype = "<f8" if arr.dtype == np.float64 else "<f4"
    return {"shape": list(arr.shape), "dtype": dtype, "offset": offset,
            "nbytes": int(arr.nbytes)}


def _ordered_tensors(model: Model) -> list[tuple[str, bool, np.ndarray]]:
    """(name, is_lisa, array) in the canonical serialization order."""
    out = [(name, False, t.data) for name, t in model.weights.named_tensors()]
    for layer in sorted(model.lisa_params):
        for pname, t in model.lisa_params[layer].tensors():
            out.append((f"{layer}.{pname}", True, t.data))
    return out


def save_checkpoint(out_dir: str, model: Model,
                    provenance: dict | None = None) -> str:
    """Write <out_dir>/model.json and model.bin; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    tensors: dict = {}
    lisa: dict = {}
    offset = 0
    chunks = []
    for name, is_lisa, arr in _ordered_tensors(model):
        arr = np.ascontiguousarray(arr)
        entry = _entry(arr, offset)
        if is_lisa:
            layer, pname = name.split(".", 1)
            lisa.setdefault(layer, {})[pname] = entry
        else:
            tensors[name] = entry
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        offset += entry["nbytes"]
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.config.to_json(),
        "sharing": model.sharing.to_json(),
        "tensors": tensors,
        "lisa": lisa,
        "provenance": provenance or {},
        "total_bytes": offset,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))
    return manifest_path


def _read_tensor(blob: bytes, entry: dict) -> Tensor:
    dtype = _DTYPES[entry["dtype"]]
    start, n = entry["offset"], entry["nbytes"]
    arr = np.frombuffer(blob[start:start + n], dtype=dtype).reshape(entry["shape"])
    return Tensor(arr.copy())


def load_checkpoint(path: str) -> tuple[Model, dict]:
    """Load a checkpoint directory (or manifest path); returns (model,
    provenance)."""
    if os.path.isdir(path):
        manifest_path = os.path.join(path, MANIFEST_NAME)
    else:
        manifest_path = path
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version "
                         f"{manifest.get('format_version')!r}")
    blob_path = os.path.join(os.path.dirname(manifest_path), BLOB_NAME)
    with open(blob_path, "rb") as fh:
        blob = fh.read()

    entries = list(manifest["tensors"].values())
    for block in manifest.get("lisa", {}).values():
        entries += list(block.values())
    total = sum(e["nbytes"] for e in entries)
    if total != len(blob) or total != manifest.get("total_bytes"):
        raise InputError("blob size does not match the manifest directory")
    spans = sorted((e["offset"], e["offset"] + e["nbytes"]) for e in entries)
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise InputError("overlapping tensor offsets in manifest")

    config = ModelConfig.from_json(manifest["model"])
    sharing = SharingConfig.from_json(manifest["sharing"])
    tensors = manifest["tensors"]

    def get(name):
        return _read_tensor(blob, tensors[name]) if name in tensors else None

    layers = []
    for i in range(config.n_layers):
        layers.append(LayerWeights(
            wq=get(f"layers.{i}.wq"), wk=get(f"layers.{i}.wk"),
            wv=get(f"layers.{i}.wv"), wo=get(f"layers.{i}.wo"),
            attn_norm=get(f"layers.{i}.attn_norm"),
            gate=get(f"layers.{i}.gate"), up=get(f"layers.{i}.up"),
            down=get(f"layers.{i}.down"), ffn_norm=get(f"layers.{i}.ffn_norm"),
        ))
    weights = ModelWeights(token_emb=get("token_emb"), layers=layers,
                           final_norm=get("final_norm"), lm_head=get("lm_head"))

    lisa_params = {}
    for layer_str, block in manifest.get("lisa", {}).items():
        kwargs = {pname: _read_tensor(blob, e) for pname, e in block.items()}
        lisa_params[int(layer_str)] = LisaParams(**kwargs)

    return Model(config, weights, sharing, lisa_params), manifest.get("provenance", {})
