"""Compressed global key cache: compression, TokenCat decompression, storage, accounting."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import DimensionError, Tensor

CACHE_MAGIC = b"GFKC"
CACHE_VERSION = 1
TOKEN_ID_BYTES = 2


@dataclass
class CacheParams:
    W_KD: Tensor  # [D, D/cr]
    W_KU: Tensor  # [D + D/cr, D]
    gain: Tensor  # [D]

    @classmethod
    def create(cls, cfg: ModelConfig, store: ParamStore, prefix: str = "cache") -> "CacheParams":
        D, Dc = cfg.d_model, cfg.d_compressed
        return cls(
            W_KD=store.uniform(f"{prefix}.W_KD", (D, Dc), 1.0 / np.sqrt(D), compression=True),
            W_KU=store.uniform(f"{prefix}.W_KU", (D + Dc, D), 1.0 / np.sqrt(D + Dc), compression=True),
            gain=store.ones(f"{prefix}.gain", (D,)),
        )


def compress(x: Tensor, p: CacheParams) -> Tensor:
    return x @ p.W_KD


def decompress_tokencat(x0: Tensor, c: Tensor, p: CacheParams) -> Tensor:
    """Proto-keys ``rmsnorm(concat(x0, c) W_KU)``."""
    if x0.shape[-1] + c.shape[-1] != p.W_KU.shape[0]:
        raise DimensionError(
            f"tokencat: concat width {x0.shape[-1]}+{c.shape[-1]} != W_KU rows {p.W_KU.shape[0]}")
    return nn.rmsnorm(T.concat([x0, c], axis=-1) @ p.W_KU, p.gain)


@dataclass
class CompressedKeyCache:
    """Append-only store of token ids and compressed keys for one stream."""

    width: int
    dtype: np.dtype = np.dtype(np.float32)
    element_width_bytes: int = 2
    _ids: list = field(default_factory=list)
    _rows: list = field(default_factory=list)
    _n: int = 0

    def __len__(self) -> int:
        return self._n

    def append(self, token_ids, c: np.ndarray) -> None:
        token_ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        c = np.asarray(c)
        if c.ndim != 2 or c.shape != (len(token_ids), self.width):
            raise DimensionError(f"cache append: expected c of shape ({len(token_ids)}, {self.width}), got {c.shape}")
        self._ids.append(token_ids.copy())
        self._rows.append(np.array(c, dtype=self.dtype, copy=True))
        self._n += len(token_ids)

    @property
    def token_ids(self) -> np.ndarray:
        if not self._ids:
            return np.zeros(0, dtype=np.int64)
        if len(self._ids) > 1:
            self._ids = [np.concatenate(self._ids)]
        return self._ids[0]

    @property
    def c(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.width), dtype=self.dtype)
        if len(self._rows) > 1:
            self._rows = [np.concatenate(self._rows)]
        return self._rows[0]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._rows) + sum(a.nbytes for a in self._ids)

    def accounted_bytes(self) -> int:
        """Footprint at the accounting width: one token id plus ``width`` entries per position."""
        return len(self) * (TOKEN_ID_BYTES + self.width * self.element_width_bytes)

    def copy(self) -> "CompressedKeyCache":
        out = CompressedKeyCache(self.width, self.dtype, self.element_width_bytes)
        if len(self):
            out.append(self.token_ids, self.c)
        return out

    # -- snapshot -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        fw = self.dtype.itemsize
        buf = io.BytesIO()
        buf.write(CACHE_MAGIC)
        buf.write(struct.pack("<IQII", CACHE_VERSION, len(self), self.width, fw))
        buf.write(self.token_ids.astype("<u4").tobytes())
        buf.write(np.ascontiguousarray(self.c).astype(f"<f{fw}").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["CompressedKeyCache", int]:
        """Parse a snapshot starting at ``offset``; returns the cache and the end offset."""
        if data[offset:offset + 4] != CACHE_MAGIC:
            raise ValueError("not a GFKC cache snapshot (bad magic)")
        version, n, width, fw = struct.unpack_from("<IQII", data, offset + 4)
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported GFKC version {version}")
        if fw not in (4, 8):
            raise ValueError(f"unsupported float width {fw}")
        pos = offset + 4 + struct.calcsize("<IQII")
        ids = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        c = np.frombuffer(data, dtype=f"<f{fw}", count=n * width, offset=pos).reshape(n, width)
        pos += fw * n * width
        out = cls(width, np.dtype(f"f{fw}"))
        if n:
            out.append(ids, c.astype(np.dtype(f"f{fw}")))
        return out, pos

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CompressedKeyCache":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())[0]


# --------------------------------------------------------------------------
# accounting

_ENTRIES = {
    "llama2": lambda L, D, H: 2 * D * L,
    "llama3": lambda L, D, H: 8 * H * L,
    "deepseek-v2": lambda L, D, H: 4.5 * H * L,
    "zamba": lambda L, D, H: 2 / 7 * D * L,
    "jamba": lambda L, D, H: 8 / 7 * H * L,
    "yoco": lambda L, D, H: 2 * D,
    "goldfinch": lambda L, D, H: 1 + D / 16,
}
ARCHITECTURES = tuple(_ENTRIES)


def entries_per_token(arch: str, n_layer: int, d_model: int, d_head: int = 128) -> float:
    key = arch.lower()
    if key not in _ENTRIES:
        raise ValueError(f"unknown architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")
    return _ENTRIES[key](n_layer, d_model, d_head)


def cache_bytes(arch: str, ctx: int, n_layer: int, d_model: int, d_head: int = 128,
                width_bytes: float = 2) -> float:
    if min(ctx, n_layer, d_model, d_head, width_bytes) <= 0:
        raise ValueError("cache_bytes arguments must be positive")
    return entries_per_token(arch, n_layer, d_model, d_head) * ctx * width_bytes


def cache_ratio(n_layer: int, d_model: int) -> float:
    """How many times smaller the GoldFinch cache is than a Llama2-style KV cache."""
    if n_layer <= 0 or d_model <= 0:
        raise ValueError("cache_ratio arguments must be positive")
    return (2 * d_model * n_layer) / (1 + d_model / 16)
