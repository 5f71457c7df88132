"""Named parameter registry with weight-decay eligibility and freeze flags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .tensor import DimensionError, Tensor


@dataclass
class ParamEntry:
    tensor: Tensor
    lora: bool = False
    compression: bool = False
    frozen: bool = False

    @property
    def decay_eligible(self) -> bool:
        # only plain projection matrices decay; LoRA factors and W_KD/W_KU never do
        return self.tensor.ndim == 2 and not self.lora and not self.compression


class ParamStore:
    """Ordered map ``name -> Tensor`` plus per-entry training flags."""

    def __init__(self, dtype=np.float32, seed: int = 0, meta: bool = False):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        # meta stores record shapes only (zero-strided views), for counting huge configs
        self.meta = meta
        self._entries: dict[str, ParamEntry] = {}

    # -- construction -------------------------------------------------------

    def add(self, name: str, value: np.ndarray, *, lora: bool = False,
            compression: bool = False) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self.meta:
            data = np.broadcast_to(np.zeros((), self.dtype), np.shape(value))
        else:
            data = np.asarray(value, dtype=self.dtype).copy()
        t = Tensor(data, requires_grad=True, name=name)
        self._entries[name] = ParamEntry(t, lora=lora, compression=compression)
        return t

    def _blank(self, shape) -> np.ndarray:
        return np.broadcast_to(np.zeros((), self.dtype), shape)

    def zeros(self, name: str, shape, **kw) -> Tensor:
        return self.add(name, self._blank(shape) if self.meta else np.zeros(shape), **kw)

    def ones(self, name: str, shape, **kw) -> Tensor:
        return self.add(name, self._blank(shape) if self.meta else np.ones(shape), **kw)

    def uniform(self, name: str, shape, bound: float, **kw) -> Tensor:
        if self.meta:
            return self.add(name, self._blank(shape), **kw)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape), **kw)

    # -- access -------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for k, e in self._entries.items():
            yield k, e.tensor

    def names(self) -> list[str]:
        return list(self._entries)

    def num_params(self) -> int:
        return int(sum(e.tensor.size for e in self._entries.values()))

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, e.tensor) for k, e in self._entries.items() if not e.frozen]

    # -- flags --------------------------------------------------------------

    def freeze(self, predicate: Callable[[str], bool]) -> list[str]:
        """Freeze every parameter whose name satisfies ``predicate``; returns the names."""
        hit = []
        for k, e in self._entries.items():
            if predicate(k):
                e.frozen = True
                e.tensor.requires_grad = False
                hit.append(k)
        return hit

    def unfreeze_all(self) -> None:
        for e in self._entries.values():
            e.frozen = False
            e.tensor.requires_grad = True

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    # -- bulk state ---------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: e.tensor.data for k, e in self._entries.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite tensor contents in place, so layer references stay valid."""
        if strict:
            missing = set(self._entries) - set(arrays)
            extra = set(arrays) - set(self._entries)
            if missing or extra:
                raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in arrays.items():
            t = self._entries[k].tensor
            if tuple(arr.shape) != t.shape:
                raise DimensionError(f"tensor {k!r}: stored shape {tuple(arr.shape)} != expected {t.shape}")
            t.data = np.array(arr, dtype=self.dtype, copy=True)

    def perturb(self, scale: float, seed: int = 0) -> None:
        """Add uniform noise to every tensor (tests use this to leave degenerate inits)."""
        rng = np.random.default_rng(seed)
        for e in self._entries.values():
            t = e.tensor
            t.data = (t.data + rng.uniform(-scale, scale, size=t.shape)).astype(self.dtype)
