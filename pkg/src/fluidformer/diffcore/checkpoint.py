"""Named-tensor checkpoint files.

Layout (little-endian)::

    "FLCK" | u32 version=1 | u32 count | u32 meta_len | meta (UTF-8 JSON)
    count x [ u16 name_len | name | u32 ndim | ndim x u32 dim ]      # manifest
    count x float32 payload, row-major, in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", VERSION, len(tensors), len(meta_bytes)), meta_bytes]
    for name, arr in tensors.items():
        nb = name.encode()
        shape = np.shape(arr)
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    def need(pos, n, what):
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")

    need(0, 16, "header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    version, count, meta_len = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    need(pos, meta_len, "metadata")
    meta = json.loads(data[pos:pos + meta_len].decode())
    pos += meta_len
    manifest = []
    for _ in range(count):
        need(pos, 2, "name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(pos, nlen + 4, "manifest entry")
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(pos, 4 * ndim, f"shape of {name}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        manifest.append((name, shape))
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        need(pos, 4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after payload")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def save_params(module, path, meta: dict | None = None) -> None:
    """Write every parameter and buffer of ``module`` in registry order."""
    save_checkpoint(path, module.state(), meta)


def load_params(module, path) -> dict:
    """Load a checkpoint into ``module``; nothing is assigned unless every entry matches.

    Returns the checkpoint metadata.
    """
    tensors, meta = load_checkpoint(path)
    assign_state(module, tensors)
    return meta


def assign_state(module, tensors: dict[str, np.ndarray]) -> None:
    expected = module.state()
    missing = [k for k in expected if k not in tensors]
    extra = [k for k in tensors if k not in expected]
    if missing or extra:
        raise CheckpointError(f"checkpoint keys differ: missing={missing} extra={extra}")
    for k, arr in expected.items():
        if tuple(tensors[k].shape) != tuple(arr.shape):
            raise CheckpointError(
                f"shape mismatch for {k}: checkpoint {tuple(tensors[k].shape)} vs model {arr.shape}")
    params = module.parameters()
    for k, arr in tensors.items():
        if k.startswith("buffer:"):
            module.set_buffer(k[len("buffer:"):], arr)
        else:
            params[k].data[...] = arr
