"""Binary checkpoint container.

Layout (little endian)::

    magic      4 bytes   b"MRPH" (model bundle) or b"MRPL" (LoRA adapter)
    version    u32
    config     u32 length + UTF-8 key=value lines
    count      u32 number of weight records
    records    u32 name length, name, u32 rank, rank x u32 dims, float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MODEL_MAGIC = b"MRPH"
LORA_MAGIC = b"MRPL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_config(config: dict) -> bytes:
    return "\n".join(f"{k}={config[k]}" for k in sorted(config)).encode()


def _decode_config(raw: bytes) -> dict:
    out = {}
    for line in raw.decode().splitlines():
        if line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def write(path, magic: bytes, config: dict, tensors: dict[str, torch.Tensor]) -> None:
    parts = [magic, struct.pack("<I", VERSION)]
    cfg = _encode_config(config)
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read(path, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    off = 8
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    config = _decode_config(data[off : off + n])
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode()
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return config, tensors
