"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"PDCK" | u32 version | u32 meta_len | meta (UTF-8 JSON) | payload | u32 crc32(payload)

``meta["manifest"]`` lists ``[name, shape, dtype]`` for every tensor in payload
order; payloads are raw little-endian float32. The remaining metadata carries
model dimensions, schedule parameters and any training bookkeeping.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PDCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def write(path, tensors: dict, meta: dict) -> None:
    manifest, chunks = [], []
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}; checkpoints store float32")
        manifest.append([name, list(arr.shape), "float32"])
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    head = json.dumps({**meta, "manifest": manifest}, sort_keys=True).encode("utf-8")
    blob = _HEAD.pack(MAGIC, VERSION, len(head)) + head + payload + _CRC.pack(zlib.crc32(payload))
    path = Path(path)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` with tensors as float32 torch tensors."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = _HEAD.size
    if len(data) < off + meta_len:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from exc
    off += meta_len
    manifest = meta.pop("manifest")
    sizes = [int(np.prod(shape, dtype=np.int64)) * 4 for _, shape, _ in manifest]
    end = off + sum(sizes)
    if len(data) != end + _CRC.size:
        raise CheckpointError(
            f"{path}: payload is {len(data) - off - _CRC.size} bytes, manifest expects {sum(sizes)}")
    payload = data[off:end]
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(payload):
        raise CheckpointError(f"{path}: checksum mismatch, payload is corrupt")
    tensors, pos = {}, 0
    for (name, shape, dtype), size in zip(manifest, sizes):
        if dtype != "float32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype}")
        arr = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        pos += size
    return tensors, meta


def load_into(module: torch.nn.Module, tensors: dict, prefix: str = "model/") -> None:
    """Copy ``prefix``-named tensors into ``module``, naming the first mismatch on failure."""
    own = module.state_dict()
    names = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    for name in sorted(set(own) | names):
        if name not in names:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if name not in own:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        src = tensors[prefix + name]
        if tuple(src.shape) != tuple(own[name].shape):
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tuple(src.shape)} != model shape {tuple(own[name].shape)}")
    module.load_state_dict({n: tensors[prefix + n] for n in own})
