"""Binary checkpoint files.

Layout::

    b"MRCKPT01"                      magic
    uint64 little-endian             header length in bytes
    header                           compact JSON, sorted keys
    tensor data                      float64 little-endian, C order

The header carries free-form ``meta`` (config, config hash, ...) and a
``tensors`` list of ``{name, shape, offset}`` with byte offsets into the data
block. Tensor names are grouped by prefix: ``theta/``, ``phi/``, ``adam_m/``,
``adam_v/``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MRCKPT01"


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = memoryview(raw)[16 + n:]
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        out[e["name"]] = np.frombuffer(data[e["offset"]:end], dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return out, header["meta"]


def bundle(theta, phi, adam_state: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Flatten parameter groups into one prefixed name space."""
    out = {f"theta/{k}": v for k, v in theta.items()}
    out.update({f"phi/{k}": v for k, v in phi.items()})
    for k, v in (adam_state or {}).items():
        group, _, name = k.partition("/")
        out[f"adam_{group}/{name}"] = v
    return out


def unbundle(tensors: Mapping[str, np.ndarray]) -> tuple[dict, dict, dict]:
    theta, phi, adam = {}, {}, {}
    for k, v in tensors.items():
        group, _, name = k.partition("/")
        if group == "theta":
            theta[name] = v
        elif group == "phi":
            phi[name] = v
        elif group.startswith("adam_"):
            adam[f"{group[5:]}/{name}"] = v
        else:
            raise CheckpointError(f"unknown tensor group {group!r}")
    return theta, phi, adam
