"""Flat binary tensor files and parameter checkpoints.

File layout (little-endian)::

    b"ESTFTNSR"            8 magic bytes
    rank                   int64
    extents[rank]          int64 each
    values[prod(extents)]  float64, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"ESTFTNSR"


class TensorFileError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    header = MAGIC + struct.pack("<q", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:8] != MAGIC:
        raise TensorFileError(f"{source}: bad magic bytes {buf[:8]!r}")
    if len(buf) < 16:
        raise TensorFileError(f"{source}: truncated header")
    (rank,) = struct.unpack_from("<q", buf, 8)
    if rank < 0 or len(buf) < 16 + 8 * rank:
        raise TensorFileError(f"{source}: bad rank {rank}")
    shape = struct.unpack_from(f"<{rank}q", buf, 16)
    offset = 16 + 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != 8 * n:
        raise TensorFileError(f"{source}: expected {8 * n} payload bytes for shape {shape}, got {len(buf) - offset}")
    return np.frombuffer(buf, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


def save_checkpoint(directory, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """One tensor file per named parameter plus a JSON manifest."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        t = params[name]
        fname = name.replace("/", "__") + ".bin"
        save_tensor(directory / "params" / fname, t)
        entries.append({"name": name, "file": fname, "shape": list(t.shape), "trainable": t.requires_grad})
    manifest = {"format": 1, "params": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise TensorFileError(f"{manifest_path}: checkpoint manifest missing") from exc
    out = {}
    for entry in manifest["params"]:
        arr = load_tensor(directory / "params" / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise TensorFileError(f"{directory / 'params' / entry['file']}: shape {arr.shape} != manifest {entry['shape']}")
        out[entry["name"]] = arr
    return out
