"""On-disk tensors.

A tensor ``name`` is two files: ``name.bin`` holding the raw little-endian
values in row-major order, and ``name.json`` holding
``{"dtype": ..., "shape": [...]}`` (plus an optional ``"meta"`` object).
Supported dtypes: float64, float32, int64.

Parameter sets (checkpoints, frontend weights) are a directory with one
tensor per entry and a ``manifest.json`` listing every entry's name, file
stem, shape and dtype.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def _dtype_name(arr) -> str:
    for name, code in DTYPES.items():
        if np.dtype(arr.dtype) == np.dtype(code):
            return name
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_tensor(path, arr, meta=None):
    """Write ``path.bin`` and ``path.json``; ``path`` has no extension."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype.kind == "i":
        arr = arr.astype("<i8")
    name = _dtype_name(arr)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr, dtype=DTYPES[name]).tobytes()
    path.with_suffix(".bin").write_bytes(data)
    side = {"dtype": name, "shape": list(arr.shape)}
    if meta is not None:
        side["meta"] = meta
    path.with_suffix(".json").write_text(dumps_json(side))
    return hashlib.sha256(data).hexdigest()


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    side_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    for p in (side_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"missing tensor file: {p}")
    side = json.loads(side_path.read_text())
    dt = np.dtype(DTYPES[side["dtype"]])
    shape = tuple(side["shape"])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{bin_path}: {len(raw)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _stem(name: str) -> str:
    return name.replace("/", "__")


def save_tensor_set(directory, tensors: dict, extra=None):
    """Save ``{name: array}`` plus a manifest; returns a checksum over all data."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    h = hashlib.sha256()
    for name in tensors:
        arr = np.asarray(tensors[name])
        digest = save_tensor(directory / _stem(name), arr)
        h.update(name.encode())
        h.update(digest.encode())
        entries.append({"name": name, "file": _stem(name), "shape": list(arr.shape),
                        "dtype": _dtype_name(arr if arr.dtype.kind != "i" else arr.astype("<i8"))})
    manifest = {"tensors": entries, "checksum": h.hexdigest()}
    if extra:
        manifest.update(extra)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(dumps_json(manifest))
    os.replace(tmp, directory / "manifest.json")
    return manifest["checksum"]


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    return json.loads(path.read_text())


def load_tensor_set(directory):
    """Returns ``(tensors, manifest)``; shapes are checked against the manifest."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = {}
    for e in manifest["tensors"]:
        arr = load_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{directory / e['file']}: shape {list(arr.shape)} != manifest {e['shape']}")
        out[e["name"]] = arr
    return out, manifest
