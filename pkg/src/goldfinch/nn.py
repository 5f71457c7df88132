"""Shared parametric primitives: lerp, lora, ddlerp, loradapt, token shift, norms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import DimensionError, Tensor

NORM_EPS = 1e-5


@dataclass
class LoraParams:
    lam: Tensor  # [out]
    A: Tensor  # [in, r]
    B: Tensor  # [r, out]

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class LoradaptParams:
    C: Tensor  # [D, r]
    Dm: Tensor  # [r, D]


@dataclass
class DdlerpParams:
    mu_x: Tensor  # [D]
    inner: LoraParams


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor | None = None


def _check_last(op: str, *xs: Tensor) -> None:
    widths = {x.shape[-1] for x in xs}
    if len(widths) != 1:
        raise DimensionError(f"{op}: last-axis widths differ: {[x.shape for x in xs]}")


def lerp(a: Tensor, b: Tensor, t) -> Tensor:
    """a + (b - a) * t."""
    if isinstance(t, Tensor):
        _check_last("lerp", a, b, t)
    else:
        _check_last("lerp", a, b)
    return a + (b - a) * t


def lora(x: Tensor, p: LoraParams) -> Tensor:
    if x.shape[-1] != p.A.shape[0]:
        raise DimensionError(f"lora: input width {x.shape[-1]} != A rows {p.A.shape[0]}")
    return p.lam + T.tanh(x @ p.A) @ p.B


def ddlerp(a: Tensor, b: Tensor, p: DdlerpParams) -> Tensor:
    """Data-dependent interpolation: the mix ratio is a lora of a static shift."""
    _check_last("ddlerp", a, b, p.mu_x)
    diff = b - a
    return a + diff * lora(a + diff * p.mu_x, p.inner)


def loradapt(x: Tensor, p: LoradaptParams) -> Tensor:
    if x.shape[-1] != p.C.shape[0]:
        raise DimensionError(f"loradapt: input width {x.shape[-1]} != C rows {p.C.shape[0]}")
    return x + T.tanh(x @ p.C) @ p.Dm


def token_shift(seq: Tensor, initial: Tensor) -> Tensor:
    """Delay ``seq`` by one step along its time axis (second to last), seeding with ``initial``."""
    if seq.ndim < 2:
        raise DimensionError(f"token_shift: need [..., T, D], got {seq.shape}")
    if initial.shape != seq.shape[:-2] + seq.shape[-1:]:
        raise DimensionError(f"token_shift: initial {initial.shape} does not match sequence {seq.shape}")
    first = T.reshape(initial, initial.shape[:-1] + (1, initial.shape[-1]))
    if seq.shape[-2] == 1:
        return first
    return T.concat([first, seq[..., :-1, :]], axis=-2)


def layernorm(x: Tensor, p: NormParams | None = None, eps: float = NORM_EPS) -> Tensor:
    if p is None:
        return T.layernorm(x, None, None, eps)
    return T.layernorm(x, p.gamma, p.beta, eps)


def rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    return T.rmsnorm(x, gain, eps)


# --------------------------------------------------------------------------
# parameter factories


def make_lora(store: ParamStore, prefix: str, d_in: int, d_out: int, rank: int,
              lam_init=0.0) -> LoraParams:
    lam = np.broadcast_to(np.asarray(lam_init, dtype=np.float64), (d_out,))
    return LoraParams(
        lam=store.add(f"{prefix}.lam", lam, lora=True),
        A=store.uniform(f"{prefix}.A", (d_in, rank), 1.0 / np.sqrt(d_in), lora=True),
        B=store.zeros(f"{prefix}.B", (rank, d_out), lora=True),
    )


def make_loradapt(store: ParamStore, prefix: str, d: int, rank: int) -> LoradaptParams:
    return LoradaptParams(
        C=store.uniform(f"{prefix}.C", (d, rank), 1.0 / np.sqrt(d), lora=True),
        Dm=store.zeros(f"{prefix}.D", (rank, d), lora=True),
    )


def make_ddlerp(store: ParamStore, prefix: str, d: int, rank: int, mu_init, lam_init) -> DdlerpParams:
    mu = np.broadcast_to(np.asarray(mu_init, dtype=np.float64), (d,))
    return DdlerpParams(mu_x=store.add(f"{prefix}.mu_x", mu),
                        inner=make_lora(store, f"{prefix}.lora", d, d, rank, lam_init))


def make_norm(store: ParamStore, prefix: str, d: int, bias: bool = True) -> NormParams:
    return NormParams(gamma=store.ones(f"{prefix}.gamma", (d,)),
                      beta=store.zeros(f"{prefix}.beta", (d,)) if bias else None)


def channel_ramp(d: int, layer_id: int, n_layer: int) -> np.ndarray:
    """RWKV-style per-channel mix init: 1 - (i/D)^(1 - layer/L)."""
    ratio = 1.0 - layer_id / max(n_layer, 1)
    return 1.0 - np.power(np.arange(d) / d, ratio)
