"""Checkpoint files: a JSON manifest plus a raw little-endian float64 sidecar.

``<path>.json`` holds names, shapes, byte offsets and any scalar state;
``<path>.bin`` holds the arrays back to back. Round trips are bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParamStore
from .optim import AdamState

FORMAT = "ecmvae-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(path, store: ParamStore, adam: AdamState | None = None,
                    meta: dict[str, Any] | None = None) -> Path:
    manifest_path, bin_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.data) for k, p in store]
    hyper = None
    if adam is not None:
        arrays += [(f"adam_m/{k}", v) for k, v in adam.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in adam.v.items()]
        hyper = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps}
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "<f8", "total_bytes": offset,
                "arrays": entries, "adam": hyper, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return (arrays by name, manifest)."""
    manifest_path, bin_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint {manifest.get('format')} v{manifest.get('version')}")
    raw = bin_path.read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise CheckpointError(f"truncated checkpoint data: {len(raw)} of {manifest['total_bytes']} bytes")
    arrays = {}
    for e in manifest["arrays"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest


def load_checkpoint(path, store: ParamStore, adam: AdamState | None = None) -> dict[str, Any]:
    """Load parameters (and Adam state, if present) into existing objects; return meta."""
    arrays, manifest = read_checkpoint(path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    missing = set(store.names()) - set(params)
    extra = set(params) - set(store.names())
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
    for k, v in params.items():
        if store[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: model {store[k].shape}, checkpoint {v.shape}")
    store.restore(params)
    if adam is not None and manifest["adam"] is not None:
        h = manifest["adam"]
        adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps = (
            h["step"], h["lr"], h["beta1"], h["beta2"], h["eps"])
        adam.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        adam.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return manifest["meta"]
