"""Versioned binary checkpoints.

Layout: magic ``FSCK``, format version (uint32 LE), header length
(uint64 LE), a JSON header carrying the kind tag, the architecture spec and
a manifest of parameter names and shapes, then the raw parameter blocks as
little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"FSCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    spec: dict
    extra: dict
    params: dict[str, np.ndarray]


def save_checkpoint(path, kind: str, spec: dict, state: dict, extra: dict | None = None) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    names, blocks, manifest = [], [], []
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        names.append(name)
        blocks.append(arr)
        manifest.append({"name": name, "shape": list(arr.shape)})
    header = json.dumps(
        {"kind": kind, "spec": spec, "extra": extra or {}, "params": manifest}
    ).encode("utf-8")
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for arr in blocks:
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a fingersynth checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated block for {entry['name']}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return Checkpoint(kind=header["kind"], spec=header["spec"], extra=header["extra"], params=params)


def state_to_module(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in params.items()})
