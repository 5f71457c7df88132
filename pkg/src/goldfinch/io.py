"""Checkpoint container ("GFCK") and the tensor-record codec shared with session snapshots."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .config import ModelConfig
from .model import Model
from .tensor import DimensionError

CKPT_MAGIC = b"GFCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_str(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(data: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    return data[pos:pos + n].decode("utf-8"), pos + n


def write_tensor_records(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        _write_str(f, name)
        f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor_records(data: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, pos = _read_str(data, pos)
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise ValueError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dt = _CODE_DTYPES[code].newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(shape).astype(_CODE_DTYPES[code])
        pos += n * dt.itemsize
    return out, pos


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _write_str(buf, model.cfg.to_text())
    write_tensor_records(buf, model.store.state())
    return buf.getvalue()


def save_checkpoint(path, model: Model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a GFCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    text, pos = _read_str(data, 8)
    tensors, _ = read_tensor_records(data, pos)
    return ModelConfig.from_text(text), tensors


def load_checkpoint(path, model: Model | None = None) -> Model:
    """Load into ``model`` (shapes must agree) or into a fresh model built from the stored config."""
    cfg, tensors = parse_checkpoint(Path(path).read_bytes())
    if model is None:
        model = Model(cfg)
    missing = set(model.store.names()) - set(tensors)
    extra = set(tensors) - set(model.store.names())
    if missing or extra:
        raise DimensionError(f"checkpoint/model tensor sets differ: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
    model.store.load_state(tensors)
    return model
