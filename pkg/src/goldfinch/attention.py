"""Softmax attention sub-layers: GOLD, GPTAlpha and a plain Llama-style baseline."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .finch import _heads, _merge
from .params import ParamStore
from .tensor import ContractError, DimensionError, Tensor


def rope_apply(x: Tensor, positions, base: float = 10000.0, interp_scale: float = 1.0) -> Tensor:
    """Rotate ``x[..., T, H]`` by angle ``pos * interp_scale * base^(-2i/H)`` (half-split pairs)."""
    H = x.shape[-1]
    if H % 2:
        raise ContractError(f"rope needs an even head size, got {H}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"rope: {positions.shape[0]} positions for {x.shape[-2]} rows")
    inv_freq = base ** (-np.arange(0, H, 2) / H)
    ang = (positions * interp_scale)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1).astype(x.dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1).astype(x.dtype)
    half = H // 2
    rotated = T.concat([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rotated * sin


def causal_attention(q: Tensor, k: Tensor, v: Tensor, q_offset: int | None = None) -> Tensor:
    """Per-head softmax attention; query ``i`` sits at absolute position ``q_offset + i``.

    ``k``/``v`` cover absolute positions ``0 .. Tk-1``; the first ``q_offset``
    of them form a prefix that every query may see.
    """
    B, N, Tq, H = q.shape
    Tk = k.shape[2]
    if q_offset is None:
        q_offset = Tk - Tq
    if q_offset + Tq > Tk:
        raise DimensionError(f"attention: queries reach position {q_offset + Tq - 1} but only {Tk} keys")
    with T.flop_tag("attention"):
        scores = T.einsum("bnth,bnsh->bnts", q, k) * (1.0 / np.sqrt(H))
        future = np.arange(Tk)[None, :] > (q_offset + np.arange(Tq))[:, None]
        if future.any():
            scores = T.masked_fill(scores, future, -np.inf)
        probs = T.softmax(scores, axis=-1)
        return T.einsum("bnts,bnsh->bnth", probs, v)


def blocked_causal_attention(q: np.ndarray, q_offset: int, n_keys: int, block: int,
                             kv_block: Callable[[int, int], tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inference-only attention that materialises keys/values one block at a time.

    Partial results are merged with the running max / running normaliser
    trick, so peak memory is bounded by the block size rather than ``n_keys``.
    """
    B, N, Tq, H = q.shape
    scale = 1.0 / np.sqrt(H)
    qpos = q_offset + np.arange(Tq)
    m = np.full((B, N, Tq, 1), -np.inf, dtype=q.dtype)
    denom = np.zeros((B, N, Tq, 1), dtype=q.dtype)
    acc = np.zeros((B, N, Tq, H), dtype=q.dtype)
    for start in range(0, n_keys, block):
        stop = min(start + block, n_keys)
        k, v = kv_block(start, stop)
        with T.flop_tag("attention"):
            s = T.einsum("bnth,bnsh->bnts", Tensor(q), Tensor(k)).data * scale
        s = np.where(np.arange(start, stop)[None, :] > qpos[:, None], -np.inf, s)
        m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
        m_safe = np.where(np.isfinite(m_new), m_new, 0)
        corr = np.exp(np.where(np.isfinite(m), m - m_safe, -np.inf))
        p = np.exp(s - m_safe)
        denom = denom * corr + p.sum(axis=-1, keepdims=True)
        with T.flop_tag("attention"):
            pv = T.einsum("bnts,bnsh->bnth", Tensor(p), Tensor(v)).data
        acc = acc * corr + pv
        m = m_new
    return acc / denom


class GoldAttention:
    """Attention whose keys come from shared proto-keys and whose values come from x0."""

    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        self.cfg = cfg
        D = cfg.d_model
        ramp = nn.channel_ramp(D, layer_id, cfg.n_layer)
        self.ddlerp_q = nn.make_ddlerp(store, f"{prefix}.ddlerp_q", D, cfg.ddlerp_rank, ramp, ramp)
        self.W_Q = store.uniform(f"{prefix}.W_Q", (D, D), 1.0 / np.sqrt(D))
        self.mu_x = store.add(f"{prefix}.mu_x", ramp)
        self.lora_k = nn.make_lora(store, f"{prefix}.lora_k", D, D, cfg.gold_lora_rank, ramp)
        self.lora_v = nn.make_lora(store, f"{prefix}.lora_v", D, D, cfg.gold_lora_rank, ramp)
        self.loradapt_k = nn.make_loradapt(store, f"{prefix}.loradapt_k", D, cfg.loradapt_rank)
        self.loradapt_v = nn.make_loradapt(store, f"{prefix}.loradapt_v", D, cfg.loradapt_rank)
        self.ln_q = nn.make_norm(store, f"{prefix}.ln_q", D)
        self.ln_k = nn.make_norm(store, f"{prefix}.ln_k", D)
        self.ln_v = nn.make_norm(store, f"{prefix}.ln_v", D)
        self.ln_o = nn.make_norm(store, f"{prefix}.ln_o", D)
        self.W_O = store.zeros(f"{prefix}.W_O", (D, D))

    def _rope(self, x: Tensor, start: int) -> Tensor:
        cfg = self.cfg
        if not cfg.rope_enabled:
            return x
        return rope_apply(x, np.arange(start, start + x.shape[-2]), cfg.rope_base, cfg.rope_interp_scale)

    def _q_rows(self, x: Tensor, x_shift: Tensor) -> Tensor:
        return nn.layernorm(nn.ddlerp(x, nn.token_shift(x, x_shift), self.ddlerp_q) @ self.W_Q, self.ln_q)

    def _kv_rows(self, x0: Tensor, kD: Tensor, x0_before: Tensor, kD_before: Tensor) -> tuple[Tensor, Tensor]:
        if x0.shape != kD.shape:
            raise DimensionError(f"gold keys: x0 {x0.shape} vs kD {kD.shape}")
        x0_prev = nn.token_shift(x0, x0_before)
        kD_prev = nn.token_shift(kD, kD_before)
        a = nn.lerp(x0, x0_prev, self.mu_x)
        k = nn.layernorm(nn.loradapt(nn.lerp(kD, kD_prev, nn.lora(a, self.lora_k)), self.loradapt_k), self.ln_k)
        v = nn.layernorm(nn.loradapt(nn.lerp(x0, x0_prev, nn.lora(a, self.lora_v)), self.loradapt_v), self.ln_v)
        return k, v

    def queries(self, x: Tensor, x_shift: Tensor, start: int) -> Tensor:
        return self._rope(_heads(self._q_rows(x, x_shift), self.cfg), start)

    def keys_values(self, x0: Tensor, kD: Tensor, x0_before: Tensor, kD_before: Tensor,
                    start: int) -> tuple[Tensor, Tensor]:
        """Per-head keys and values for a span of positions, given the rows just before it.

        Counted under the ``decompress`` FLOP tag: at decode time this is the
        per-step cost of re-deriving keys from the compressed cache.
        """
        with T.flop_tag("decompress"):
            k, v = self._kv_rows(x0, kD, x0_before, kD_before)
        return self._rope(_heads(k, self.cfg), start), _heads(v, self.cfg)

    def qkv(self, x: Tensor, x0: Tensor, kD: Tensor, x_shift: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Full-width q, k, v ``[B, T, D]`` for a sequence starting at position 0 (before RoPE)."""
        if not (x.shape[:2] == x0.shape[:2] == kD.shape[:2]):
            raise DimensionError(f"gold_qkv: row counts differ: x {x.shape}, x0 {x0.shape}, kD {kD.shape}")
        zero = Tensor(np.zeros((x.shape[0], x.shape[2]), x.dtype))
        k, v = self._kv_rows(x0, kD, zero, zero)
        return self._q_rows(x, x_shift), k, v

    def output(self, y: Tensor) -> Tensor:
        return nn.layernorm(_merge(y), self.ln_o) @ self.W_O

    def forward(self, x: Tensor, x_shift: Tensor, x0_all: Tensor, kD_all: Tensor,
                q_offset: int = 0) -> Tensor:
        """``x``: sub-layer input rows at positions ``q_offset..``; ``x0_all``/``kD_all`` start at 0."""
        if x0_all.shape[1] != q_offset + x.shape[1] or kD_all.shape != x0_all.shape:
            raise DimensionError(
                f"gold attention: {x.shape[1]} queries at offset {q_offset} need "
                f"{q_offset + x.shape[1]} key rows, got x0 {x0_all.shape} / kD {kD_all.shape}")
        zero = Tensor(np.zeros((x.shape[0], x.shape[2]), x.dtype))
        q = self.queries(x, x_shift, q_offset)
        k, v = self.keys_values(x0_all, kD_all, zero, zero, 0)
        return self.output(causal_attention(q, k, v, q_offset))

    def forward_blocked(self, x: Tensor, x_shift: Tensor, n_keys: int, q_offset: int, block: int,
                        rows: Callable[[int, int], tuple[Tensor, Tensor, Tensor, Tensor]]) -> Tensor:
        """Inference path: ``rows(start, stop)`` yields ``(x0, kD, x0_before, kD_before)`` for a span."""
        q = self.queries(x, x_shift, q_offset)

        def kv_block(start, stop):
            k, v = self.keys_values(*rows(start, stop), start)
            return k.data, v.data

        if block >= n_keys:
            k, v = kv_block(0, n_keys)
            y = causal_attention(q, Tensor(k), Tensor(v), q_offset)
        else:
            y = Tensor(blocked_causal_attention(q.data, q_offset, n_keys, block, kv_block))
        return self.output(y)


class GptAlphaAttention:
    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        self.cfg = cfg
        D = cfg.d_model
        ramp = nn.channel_ramp(D, layer_id, cfg.n_layer)
        for t in ("q", "k", "v"):
            setattr(self, f"ddlerp_{t}", nn.make_ddlerp(store, f"{prefix}.ddlerp_{t}", D, cfg.ddlerp_rank, ramp, ramp))
            setattr(self, f"W_{t.upper()}", store.uniform(f"{prefix}.W_{t.upper()}", (D, D), 1.0 / np.sqrt(D)))
            setattr(self, f"ln_{t}", nn.make_norm(store, f"{prefix}.ln_{t}", D))
        self.ln_o = nn.make_norm(store, f"{prefix}.ln_o", D)
        self.W_O = store.zeros(f"{prefix}.W_O", (D, D))

    def forward(self, x: Tensor, x_shift: Tensor) -> Tensor:
        cfg = self.cfg
        xprev = nn.token_shift(x, x_shift)
        q = nn.layernorm(nn.ddlerp(x, xprev, self.ddlerp_q) @ self.W_Q, self.ln_q)
        k = nn.layernorm(nn.ddlerp(x, xprev, self.ddlerp_k) @ self.W_K, self.ln_k)
        v = nn.layernorm(nn.ddlerp(x, xprev, self.ddlerp_v) @ self.W_V, self.ln_v)
        q, k, v = _heads(q, cfg), _heads(k, cfg), _heads(v, cfg)
        if cfg.rope_enabled:
            pos = np.arange(x.shape[1])
            q = rope_apply(q, pos, cfg.rope_base, cfg.rope_interp_scale)
            k = rope_apply(k, pos, cfg.rope_base, cfg.rope_interp_scale)
        return nn.layernorm(_merge(causal_attention(q, k, v, 0)), self.ln_o) @ self.W_O


class LlamaAttention:
    """Plain multi-head attention with RoPE and no token shift or extra norms."""

    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        self.cfg = cfg
        D = cfg.d_model
        for name in ("W_Q", "W_K", "W_V"):
            setattr(self, name, store.uniform(f"{prefix}.{name}", (D, D), 1.0 / np.sqrt(D)))
        self.W_O = store.zeros(f"{prefix}.W_O", (D, D))

    def forward(self, x: Tensor, x_shift: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        pos = np.arange(x.shape[1])
        q = rope_apply(_heads(x @ self.W_Q, cfg), pos, cfg.rope_base, cfg.rope_interp_scale)
        k = rope_apply(_heads(x @ self.W_K, cfg), pos, cfg.rope_base, cfg.rope_interp_scale)
        v = _heads(x @ self.W_V, cfg)
        return _merge(causal_attention(q, k, v, 0)) @ self.W_O
