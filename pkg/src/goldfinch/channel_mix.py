"""Finch channel mixing (the FFN of every layer) and the SwiGLU FFN of the Llama baseline."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import Tensor


class ChannelMix:
    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        D, F = cfg.d_model, cfg.ffn_hidden
        ramp = nn.channel_ramp(D, layer_id, cfg.n_layer)
        self.mu_r = store.add(f"{prefix}.mu_r", ramp)
        self.mu_k = store.add(f"{prefix}.mu_k", ramp)
        self.W_R = store.uniform(f"{prefix}.W_R", (D, D), 1.0 / np.sqrt(D))
        self.W_K = store.uniform(f"{prefix}.W_K", (D, F), 1.0 / np.sqrt(D))
        self.W_V = store.zeros(f"{prefix}.W_V", (F, D))

    def forward(self, x: Tensor, shift: Tensor) -> tuple[Tensor, Tensor]:
        xprev = nn.token_shift(x, shift)
        r = nn.lerp(x, xprev, self.mu_r) @ self.W_R
        k = nn.lerp(x, xprev, self.mu_k) @ self.W_K
        v = T.square(T.relu(k)) @ self.W_V
        return T.sigmoid(r) * v, Tensor(x.data[:, -1].copy())


class SwiGLU:
    def __init__(self, cfg: ModelConfig, store: ParamStore, prefix: str, layer_id: int):
        D, F = cfg.d_model, cfg.ffn_hidden
        self.W_gate = store.uniform(f"{prefix}.W_gate", (D, F), 1.0 / np.sqrt(D))
        self.W_up = store.uniform(f"{prefix}.W_up", (D, F), 1.0 / np.sqrt(D))
        self.W_down = store.zeros(f"{prefix}.W_down", (F, D))

    def forward(self, x: Tensor, shift: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        return (T.silu(x @ self.W_gate) * (x @ self.W_up)) @ self.W_down, None
