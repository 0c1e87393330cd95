"""Binary container for named float32 parameter tables.

Layout (little-endian)::

    magic (4 bytes) | version (u8) | header length (u32) | header JSON (utf-8)
    | parameter count (u32)
    | per parameter: name length (u16) | name | ndim (u8) | dims (u32 each)
                     | float32 data, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(Exception):
    pass


def write_container(path: str | Path, magic: bytes, header: dict, params: "dict[str, np.ndarray]") -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [magic, bytes([VERSION]), struct.pack("<I", len(head)), head, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if len(raw) < 5:
        raise CheckpointError(f"{path}: file too short")
    if raw[:4] != magic:
        raise CheckpointError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw[4]}")
    try:
        return _parse(raw)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed container ({exc})") from None


def _parse(raw: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    pos = 5
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 4 * size > len(raw):
            raise ValueError(f"parameter {name!r} is truncated")
        params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes")
    return header, params


def state_to_numpy(module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().numpy()) for k, v in module.state_dict().items())


def load_numpy_state(module, params: dict) -> None:
    import torch

    state = module.state_dict()
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, v in params.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{k}: checkpoint shape {v.shape} vs model {tuple(state[k].shape)}")
    module.load_state_dict({k: torch.from_numpy(np.asarray(v)).to(state[k].dtype) for k, v in params.items()})


def parameter_checksum(module) -> str:
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
