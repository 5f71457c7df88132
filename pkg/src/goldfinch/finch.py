"""Finch-C2 time mixing and the original Finch time mixer used as a baseline.

Tensors inside the wkv kernels are laid out ``[B, N, T, H]`` (batch, head,
time, head channel).  Decay enters as ``log_w = -exp(d)``; the chunked kernel
only ever exponentiates non-positive sums of ``log_w``, so no ratio of decay
products is formed and nothing can overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import Tensor


@dataclass
class WkvState:
    S: Tensor  # [B, N, H, H]
    shift: Tensor  # [B, D] last time-mix input

    @classmethod
    def zeros(cls, batch: int, cfg: ModelConfig) -> "WkvState":
        dt = cfg.np_dtype
        return cls(S=Tensor(np.zeros((batch, cfg.n_head, cfg.head_size, cfg.head_size), dt)),
                   shift=Tensor(np.zeros((batch, cfg.d_model), dt)))

    def copy(self) -> "WkvState":
        return WkvState(S=Tensor(self.S.data.copy()), shift=Tensor(self.shift.data.copy()))


# --------------------------------------------------------------------------
# wkv kernels


def _step_read(r_t: Tensor, S: Tensor) -> Tensor:
    # r_t [B,N,1,H] . S [B,N,H,H] -> [B,N,1,H]
    return T.einsum("bnth,bnhj->bntj", r_t, S)


def wkv_sequential(r: Tensor, k: Tensor, v: Tensor, log_w: Tensor, S0: Tensor,
                   return_states: bool = False):
    """Reference scan: ``y_t = r_t . S_t``; ``S_{t+1} = diag(w_t) S_t + k_t^T v_t``.

    ``S_t`` holds tokens strictly before ``t``.  Returns ``(y, S_final)``, plus
    the stacked per-step states ``[B,N,T,H,H]`` (numpy) when requested.
    """
    n_t = r.shape[2]
    S = S0
    ys, states = [], []
    for t in range(n_t):
        sl = (slice(None), slice(None), slice(t, t + 1))
        if return_states:
            states.append(S.data.copy())
        ys.append(_step_read(r[sl], S))
        kv = T.einsum("bnth,bntj->bnhj", k[sl], v[sl])
        decay = T.reshape(T.exp(log_w[sl]), S.shape[:2] + (S.shape[2], 1))
        S = decay * S + kv
    y = ys[0] if n_t == 1 else T.concat(ys, axis=2)
    if return_states:
        return y, S, np.stack(states, axis=2)
    return y, S


def wkv_chunked(r: Tensor, k: Tensor, v: Tensor, log_w: Tensor, S0: Tensor, chunk_len: int):
    """Chunk-parallel form of :func:`wkv_sequential`.

    Within a chunk the decayed key/query interaction is formed explicitly as
    ``exp(A_excl[t] - A_incl[i])`` for ``i < t``; across chunks a state of
    shape ``[H, H]`` is carried.
    """
    if chunk_len < 1:
        raise T.ContractError("chunk_len must be >= 1")
    B, N, n_t, H = r.shape
    L = min(chunk_len, n_t)
    pad = (-n_t) % L
    if pad:
        # zero keys and unit decay leave the state untouched on padded steps
        zeros = Tensor(np.zeros((B, N, pad, H), r.dtype))
        r, k, v, log_w = (T.concat([x, zeros], axis=2) for x in (r, k, v, log_w))
    C = (n_t + pad) // L
    shp = (B, N, C, L, H)
    r, k, v, log_w = (T.reshape(x, shp) for x in (r, k, v, log_w))

    a_incl = T.cumsum(log_w, axis=3)
    a_excl = a_incl - log_w
    a_last = a_incl[:, :, :, L - 1:L, :]  # [B,N,C,1,H]

    # intra-chunk
    strict = np.tril(np.ones((L, L), dtype=bool), k=-1)  # [t, i], i < t
    diff = T.reshape(a_excl, (B, N, C, L, 1, H)) - T.reshape(a_incl, (B, N, C, 1, L, H))
    decay = T.exp(T.masked_fill(diff, ~strict[:, :, None], -np.inf))
    rk = T.reshape(r, (B, N, C, L, 1, H)) * T.reshape(k, (B, N, C, 1, L, H))
    scores = T.sum(rk * decay, axis=5)  # [B,N,C,L,L]
    y_intra = T.einsum("bncti,bncij->bnctj", scores, v)

    # chunk summaries
    r_dec = r * T.exp(a_excl)
    k_dec = k * T.exp(a_last - a_incl)
    kv = T.einsum("bnclh,bnclj->bnchj", k_dec, v)
    chunk_decay = T.reshape(T.exp(a_last), (B, N, C, H, 1))

    S = S0
    carried = []
    for c in range(C):
        carried.append(T.reshape(S, (B, N, 1, H, H)))
        S = chunk_decay[:, :, c] * S + kv[:, :, c]
    S_stack = carried[0] if C == 1 else T.concat(carried, axis=2)
    y_inter = T.einsum("bnclh,bnchj->bnclj", r_dec, S_stack)

    y = T.reshape(y_inter + y_intra, (B, N, C * L, H))
    if pad:
        y = y[:, :, :n_t]
    return y, S


def _heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    B, n_t, _ = x.shape
    return T.transpose(T.reshape(x, (B, n_t, cfg.n_head, cfg.head_size)), (0, 2, 1, 3))


def _merge(y: Tensor) -> Tensor:
    B, N, n_t, H = y.shape
    return T.reshape(T.transpose(y, (0, 2, 1, 3)), (B, n_t, N * H))


def run_wkv(r, k, v, log_w, S0, cfg: ModelConfig):
    if r.shape[2] == 1 or cfg.chunk_len == 1:
        return wkv_sequential(r, k, v, log_w, S0)
    return wkv_chunked(r, k, v, log_w, S0, cfg.chunk_len)


def decay_init(d: int, layer_id: int, n_layer: int) -> np.ndarray:
    """Monotone per-channel ramp over [-6, -0.5]: slow decay first, fast decay last."""
    ratio = layer_id / max(n_layer - 1, 1)
    return -6.0 + 5.5 * np.power(np.arange(d) / max(d - 1, 1), 0.7 + 1.3 * ratio)


# --------------------------------------------------------------------------
# Finch-C2


class FinchC2TimeMix:
    targets = ("d", "r", "k", "v", "u")

    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        self.cfg = cfg
        D = cfg.d_model
        ramp = nn.channel_ramp(D, layer_id, cfg.n_layer)
        names = self.targets if cfg.second_value_enabled else self.targets[:-1]
        self.ddlerp = {t: nn.make_ddlerp(store, f"{prefix}.ddlerp_{t}", D, cfg.ddlerp_rank, ramp, ramp)
                       for t in names}
        self.lora_w = nn.make_lora(store, f"{prefix}.lora_w", D, D, cfg.decay_rank,
                                   decay_init(D, layer_id, cfg.n_layer))
        bound = 1.0 / np.sqrt(D)
        self.W_R = store.uniform(f"{prefix}.W_R", (D, D), bound)
        self.W_K = store.uniform(f"{prefix}.W_K", (D, D), bound)
        self.W_V = store.uniform(f"{prefix}.W_V", (D, D), bound)
        if cfg.second_value_enabled:
            self.W_UD = store.uniform(f"{prefix}.W_UD", (D, cfg.second_value_rank), bound, lora=True)
            self.W_UU = store.zeros(f"{prefix}.W_UU", (cfg.second_value_rank, D), lora=True)
        self.ln_x = nn.make_norm(store, f"{prefix}.ln_x", D)
        self.W_O = store.zeros(f"{prefix}.W_O", (D, D))

    def decay(self, x: Tensor, xprev: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(w, log_w)`` with ``w = exp(-exp(d))``."""
        d = nn.lora(nn.ddlerp(x, xprev, self.ddlerp["d"]), self.lora_w)
        log_w = -T.exp(d)
        return T.exp(log_w), log_w

    def projections(self, x: Tensor, xprev: Tensor, w: Tensor):
        r = nn.ddlerp(x, xprev, self.ddlerp["r"]) @ self.W_R
        k = nn.ddlerp(x, xprev, self.ddlerp["k"]) @ self.W_K
        if self.cfg.key_decay_scaling_enabled:
            k = k * (1.0 - w)
        v = nn.ddlerp(x, xprev, self.ddlerp["v"]) @ self.W_V
        u2 = None
        if self.cfg.second_value_enabled:
            u = nn.ddlerp(x, xprev, self.ddlerp["u"])
            u2 = u @ self.W_V + T.tanh(u @ self.W_UD) @ self.W_UU
        return r, k, v, u2

    def forward(self, x: Tensor, state: WkvState | None = None) -> tuple[Tensor, WkvState]:
        cfg = self.cfg
        if state is None:
            state = WkvState.zeros(x.shape[0], cfg)
        xprev = nn.token_shift(x, state.shift)
        w, log_w = self.decay(x, xprev)
        r, k, v, u2 = self.projections(x, xprev, w)
        y, S = run_wkv(_heads(r, cfg), _heads(k, cfg), _heads(v, cfg), _heads(log_w, cfg), state.S, cfg)
        y = _merge(y)
        if u2 is not None:
            y = y + u2
        out = nn.layernorm(y, self.ln_x) @ self.W_O
        return out, WkvState(S=Tensor(S.data), shift=Tensor(x.data[:, -1].copy()))


# --------------------------------------------------------------------------
# original Finch (RWKV-6) baseline: gate, bonus u, per-head GroupNorm


class FinchTimeMix:
    targets = ("w", "k", "v", "r", "g")
    group_eps = 64e-5

    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        self.cfg = cfg
        D = cfg.d_model
        ramp = nn.channel_ramp(D, layer_id, cfg.n_layer)
        self.ddlerp = {t: nn.make_ddlerp(store, f"{prefix}.ddlerp_{t}", D, cfg.ddlerp_rank, ramp, ramp)
                       for t in self.targets}
        self.lora_w = nn.make_lora(store, f"{prefix}.lora_w", D, D, cfg.decay_rank,
                                   decay_init(D, layer_id, cfg.n_layer))
        bound = 1.0 / np.sqrt(D)
        for name in ("W_R", "W_K", "W_V", "W_G"):
            setattr(self, name, store.uniform(f"{prefix}.{name}", (D, D), bound))
        self.bonus = store.add(f"{prefix}.bonus", 0.5 * ramp)
        self.ln_x = nn.make_norm(store, f"{prefix}.ln_x", D)
        self.W_O = store.zeros(f"{prefix}.W_O", (D, D))

    def forward(self, x: Tensor, state: WkvState | None = None) -> tuple[Tensor, WkvState]:
        cfg = self.cfg
        B, n_t, D = x.shape
        if state is None:
            state = WkvState.zeros(B, cfg)
        xprev = nn.token_shift(x, state.shift)
        log_w = -T.exp(nn.lora(nn.ddlerp(x, xprev, self.ddlerp["w"]), self.lora_w))
        k = nn.ddlerp(x, xprev, self.ddlerp["k"]) @ self.W_K
        v = nn.ddlerp(x, xprev, self.ddlerp["v"]) @ self.W_V
        r = nn.ddlerp(x, xprev, self.ddlerp["r"]) @ self.W_R
        g = T.silu(nn.ddlerp(x, xprev, self.ddlerp["g"]) @ self.W_G)
        rh, kh, vh = _heads(r, cfg), _heads(k, cfg), _heads(v, cfg)
        y, S = run_wkv(rh, kh, vh, _heads(log_w, cfg), state.S, cfg)
        # bonus: current token enters its own read-out, weighted by u
        bonus = T.sum(rh * kh * T.reshape(self.bonus, (1, cfg.n_head, 1, cfg.head_size)), axis=3)
        y = y + T.reshape(bonus, bonus.shape + (1,)) * vh
        y = T.transpose(y, (0, 2, 1, 3))  # [B,T,N,H]
        y = T.reshape(T.layernorm(y, None, None, self.group_eps), (B, n_t, D))
        y = y * self.ln_x.gamma + self.ln_x.beta
        out = (y * g) @ self.W_O
        return out, WkvState(S=Tensor(S.data), shift=Tensor(x.data[:, -1].copy()))
