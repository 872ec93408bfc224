"""Binary checkpoints: named float32 tensors in a single file.

Layout (all integers little-endian unless noted):
  magic     4 bytes, b"WFCK"
  version   u32
  count     u32, number of tensors
  per tensor:
    name_len  u16, then that many UTF-8 bytes
    rank      u8
    dims      rank * u32
    payload   prod(dims) float32 values

Readers validate the magic, the version, every length against the file
size, and that nothing trails the last tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import Tensor

MAGIC = b"WFCK"
VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays (Tensor or ndarray values) as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = []
    for name, value in tensors.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name!r}")
        if data.ndim > 0xFF:
            raise DimensionError(f"tensor rank {data.ndim} exceeds format limit")
        items.append((encoded, data))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for encoded, data in items:
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            if data.ndim:
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float32 ndarray."""
    path = Path(path)
    raw = path.read_bytes()

    def need(offset: int, nbytes: int, what: str) -> int:
        end = offset + nbytes
        if end > len(raw):
            raise FormatError(f"{path}: truncated {what} at byte offset {offset}")
        return end

    off = need(0, 4, "magic")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    end = need(off, 8, "header")
    version, count = struct.unpack("<II", raw[off:end])
    off = end
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {VERSION})")

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        end = need(off, 2, f"name length of tensor {i}")
        (name_len,) = struct.unpack("<H", raw[off:end])
        off = end
        end = need(off, name_len, f"name of tensor {i}")
        try:
            name = raw[off:end].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor {i} name is not UTF-8 at byte offset {off}") from exc
        off = end
        end = need(off, 1, f"rank of '{name}'")
        rank = raw[off]
        off = end
        end = need(off, 4 * rank, f"dims of '{name}'")
        dims = struct.unpack(f"<{rank}I", raw[off:end]) if rank else ()
        off = end
        numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = need(off, 4 * numel, f"payload of '{name}'")
        out[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at byte offset {off}")
    return out


def load_into(model_tensors: dict[str, Tensor], loaded: dict[str, np.ndarray],
              ignore_prefix: str = "meta.") -> None:
    """Copy loaded arrays into a model's tensors by name, checking shapes."""
    for name, tensor in model_tensors.items():
        if name not in loaded:
            raise FormatError(f"checkpoint is missing tensor '{name}'")
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise DimensionError(
                f"checkpoint tensor '{name}' has shape {arr.shape}, model expects {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    extra = [k for k in loaded if k not in model_tensors and not k.startswith(ignore_prefix)]
    if extra:
        raise FormatError(f"checkpoint holds unknown tensors: {sorted(extra)[:5]}")
