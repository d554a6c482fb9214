"""ParamStore checkpoints: ``manifest.json`` plus one raw little-endian payload.

The manifest lists every tensor (parameters and Adam moments) with its shape,
dtype and byte offset into ``params.bin``. Arbitrary JSON-serializable extras
(network config, RNG state, ...) ride along under ``"extra"``.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .layers import ParamStore

MANIFEST = "manifest.json"
PAYLOAD = "params.bin"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_store(store: ParamStore, path, extra=None, dtype="<f8"):
    """Write ``store`` to directory ``path``. ``dtype`` is ``<f8`` (exact
    resume) or ``<f4`` (compact export)."""
    os.makedirs(path, exist_ok=True)
    entries, offset = [], 0
    blobs = []
    for kind, table in (("param", {k: p.data for k, p in store.items()}),
                        ("adam_m", store.m), ("adam_v", store.v)):
        for name, arr in table.items():
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "dtype": dtype, "step": store.step,
                "tensors": entries, "extra": extra or {}}
    tmp = os.path.join(path, PAYLOAD + ".tmp")
    with open(tmp, "wb") as fh:
        for b in blobs:
            fh.write(b)
    os.replace(tmp, os.path.join(path, PAYLOAD))
    tmp = os.path.join(path, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, MANIFEST))


def read_manifest(path) -> dict:
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_into(store: ParamStore, path) -> dict:
    """Fill an already-constructed store from disk; returns the manifest."""
    manifest = read_manifest(path)
    with open(os.path.join(path, PAYLOAD), "rb") as fh:
        payload = fh.read()
    dtype = np.dtype(manifest["dtype"])
    seen = set()
    for e in manifest["tensors"]:
        name, kind = e["name"], e["kind"]
        if name not in store:
            raise CheckpointError(f"checkpoint tensor {name!r} not in model")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"payload truncated at tensor {name!r}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dtype).astype(np.float64)
        arr = arr.reshape(e["shape"])
        target = {"param": store[name].data, "adam_m": store.m[name], "adam_v": store.v[name]}[kind]
        if target.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = set(store.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    store.step = int(manifest["step"])
    return manifest
