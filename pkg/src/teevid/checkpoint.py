"""Versioned parameter container.

Layout: the 8-byte magic ``TEEPARM1``, a little-endian uint64 header length,
a UTF-8 JSON header, then the raw little-endian tensor bytes back to back.
The header holds ``{"version": 1, "metadata": {...}, "manifest": [{"name",
"dtype", "shape", "offset", "nbytes"}, ...]}``. Files are byte-deterministic
for identical inputs, and loading is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np
import torch

from .errors import SchemaError

MAGIC = b"TEEPARM1"
VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "float16": np.float16}


def _as_numpy(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def save_params(path: str | os.PathLike, tensors: Mapping[str, object], metadata: dict | None = None) -> str:
    """Write ``tensors`` (name -> array) and return the sha256 of the file."""
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise SchemaError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.tobytes(order="C")
        manifest.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "metadata": metadata or {}, "manifest": manifest}, sort_keys=True
    ).encode()
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(payload)
    return hashlib.sha256(payload).hexdigest()


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise SchemaError("not a parameter container", str(path))
        (n,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(n))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"corrupt header: {exc}", str(path)) from None
    if header.get("version") != VERSION:
        raise SchemaError(f"unsupported container version {header.get('version')}", str(path))
    return header, 16 + n


def load_params(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        body = fh.read()
    out = {}
    for entry in header["manifest"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise SchemaError(f"truncated tensor {entry['name']}", str(path))
        arr = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        out[entry["name"]] = torch.from_numpy(arr)
    return out, header["metadata"]


def state_hash(module: torch.nn.Module) -> str:
    """sha256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(_as_numpy(t).tobytes())
    return h.hexdigest()


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
