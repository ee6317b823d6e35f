"""Binary tensor table: the on-disk format for checkpoints and frozen datasets.

Layout (little-endian): b"MCAE", u32 version (1), u32 config length, UTF-8
config text, u32 tensor count, then per tensor: u16 name length, name,
u8 dtype (0 = float32), u8 ndim, ndim x u64 dims, raw payload.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCAE"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config_text: str, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    cfg = config_text.encode("utf-8")
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg + struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"checkpoint tensors must be float32; {name} is {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an MCAE checkpoint")
    version, n_cfg = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    text = take(n_cfg).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = DTYPE_CODES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return text, tensors
