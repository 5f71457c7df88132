"""Model assembly for all five variants, plus embeddings, head and parameter counting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import nn
from . import tensor as T
from .attention import GoldAttention, GptAlphaAttention, LlamaAttention
from .cache import CacheParams, compress, decompress_tokencat
from .channel_mix import ChannelMix, SwiGLU
from .config import ModelConfig
from .finch import FinchC2TimeMix, FinchTimeMix, WkvState
from .params import ParamStore
from .tensor import ContractError, Tensor

EMBED_INIT = 1e-4


@dataclass
class LayerState:
    """Token-shift / recurrent state of one layer at the last processed position."""

    att: Any  # WkvState for recurrent layers, Tensor [B, D] (last input) for attention layers
    ffn: Tensor  # [B, D] last channel-mix input

    def copy(self) -> "LayerState":
        att = self.att.copy() if isinstance(self.att, WkvState) else Tensor(self.att.data.copy())
        return LayerState(att=att, ffn=Tensor(self.ffn.data.copy()))


class Block:
    _time_mix = {"finch_c2": FinchC2TimeMix, "finch": FinchTimeMix, "gold": GoldAttention,
                 "gptalpha": GptAlphaAttention, "llama": LlamaAttention}

    def __init__(self, cfg: ModelConfig, store: ParamStore, layer_id: int, kind: str):
        self.kind = kind
        self.layer_id = layer_id
        prefix = f"blocks.{layer_id}"
        self.rms = kind == "llama"
        if self.rms:
            self.ln1 = store.ones(f"{prefix}.ln1.gamma", (cfg.d_model,))
            self.ln2 = store.ones(f"{prefix}.ln2.gamma", (cfg.d_model,))
        else:
            self.ln1 = nn.make_norm(store, f"{prefix}.ln1", cfg.d_model)
            self.ln2 = nn.make_norm(store, f"{prefix}.ln2", cfg.d_model)
        self.att = self._time_mix[kind](cfg, store, f"{prefix}.att", layer_id)
        ffn_cls = SwiGLU if kind == "llama" else ChannelMix
        self.ffn = ffn_cls(cfg, store, f"{prefix}.ffn", layer_id)

    @property
    def recurrent(self) -> bool:
        return self.kind in ("finch_c2", "finch")

    def norm1(self, x: Tensor) -> Tensor:
        return nn.rmsnorm(x, self.ln1) if self.rms else nn.layernorm(x, self.ln1)

    def norm2(self, x: Tensor) -> Tensor:
        return nn.rmsnorm(x, self.ln2) if self.rms else nn.layernorm(x, self.ln2)

    def zero_state(self, batch: int, cfg: ModelConfig) -> LayerState:
        zero = Tensor(np.zeros((batch, cfg.d_model), cfg.np_dtype))
        att = WkvState.zeros(batch, cfg) if self.recurrent else zero
        return LayerState(att=att, ffn=Tensor(zero.data.copy()))

    def forward(self, x: Tensor, state: LayerState, gold_ctx: dict | None = None) -> tuple[Tensor, LayerState]:
        h = self.norm1(x)
        if self.recurrent:
            dx, att_state = self.att.forward(h, state.att)
        else:
            att_state = Tensor(h.data[:, -1].copy())
            if self.kind == "gold":
                dx = self._gold(h, state.att, gold_ctx)
            elif self.kind == "gptalpha":
                dx = self.att.forward(h, state.att)
            else:
                dx = self.att.forward(h)
        x = x + dx
        h = self.norm2(x)
        dx, ffn_state = self.ffn.forward(h, state.ffn)
        if ffn_state is None:
            ffn_state = state.ffn
        return x + dx, LayerState(att=att_state, ffn=ffn_state)

    def _gold(self, h: Tensor, shift: Tensor, ctx: dict) -> Tensor:
        if ctx is None:
            raise ContractError("GOLD layer needs x0/kD context")
        if "rows" in ctx:
            return self.att.forward_blocked(h, shift, ctx["n_keys"], ctx["q_offset"], ctx["block"], ctx["rows"])
        return self.att.forward(h, shift, ctx["x0"], ctx["kD"], ctx.get("q_offset", 0))


class Model:
    def __init__(self, cfg: ModelConfig, meta: bool = False):
        self.cfg = cfg
        self.store = store = ParamStore(cfg.np_dtype, seed=cfg.seed, meta=meta)
        D, V = cfg.d_model, cfg.vocab_size
        self.emb = store.uniform("emb", (V, D), EMBED_INIT)
        self.ln0 = nn.make_norm(store, "ln0", D)
        self.blocks: list[Block] = []
        kinds = cfg.layer_kinds()
        for i, kind in enumerate(kinds):
            if kind == "gold" and i == cfg.split:
                # registered once, between the recurrent stack and the GOLD layers
                self.cache_params = CacheParams.create(cfg, store)
            self.blocks.append(Block(cfg, store, i, kind))
        if cfg.n_gold == 0:
            self.cache_params = None
        self.ln_out = (store.ones("ln_out.gamma", (D,)) if cfg.variant == "llama_lite"
                       else nn.make_norm(store, "ln_out", D))
        self.head = None if cfg.tied_embeddings else store.uniform("head", (D, V), 0.5 / np.sqrt(D))

    # -- pieces ---------------------------------------------------------------

    @property
    def split(self) -> int:
        return self.cfg.split

    def embed(self, token_ids) -> Tensor:
        """x0 = layernorm(embedding rows), shape ``[B, T, D]``."""
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError(f"token id out of range [0, {self.cfg.vocab_size})")
        return nn.layernorm(T.embedding(self.emb, ids), self.ln0)

    def compress(self, x: Tensor) -> Tensor:
        return compress(x, self.cache_params)

    def decompress(self, x0: Tensor, c: Tensor) -> Tensor:
        with T.flop_tag("decompress"):
            return decompress_tokencat(x0, c, self.cache_params)

    def logits(self, x: Tensor, select=None) -> Tensor:
        h = nn.rmsnorm(x, self.ln_out) if self.cfg.variant == "llama_lite" else nn.layernorm(x, self.ln_out)
        if select is not None:
            h = h[np.asarray(select, dtype=bool)]
        W = T.transpose(self.emb) if self.head is None else self.head
        with T.flop_tag("head"):
            return h @ W

    def zero_states(self, batch: int = 1) -> list[LayerState]:
        return [b.zero_state(batch, self.cfg) for b in self.blocks]

    # -- full parallel forward ----------------------------------------------

    def hidden(self, token_ids) -> tuple[Tensor, dict]:
        """Residual stream after the last layer plus intermediate tensors (x0, c, kD, tap)."""
        x0 = self.embed(token_ids)
        B = x0.shape[0]
        x = x0
        extras: dict = {"x0": x0}
        gold_ctx = None
        for i, block in enumerate(self.blocks):
            if block.kind == "gold" and gold_ctx is None:
                c = self.compress(x)
                kD = self.decompress(x0, c)
                extras.update(tap=x, c=c, kD=kD)
                gold_ctx = {"x0": x0, "kD": kD, "q_offset": 0}
            x, _ = block.forward(x, block.zero_state(B, self.cfg), gold_ctx)
        return x, extras

    def forward(self, token_ids, select=None) -> Tensor:
        """Training-mode forward.  Returns logits ``[B, T, V]``, or ``[M, V]`` for the selected rows."""
        x, _ = self.hidden(token_ids)
        return self.logits(x, select)

    __call__ = forward

    def num_params(self) -> int:
        return self.store.num_params()


def param_count(cfg: ModelConfig) -> int:
    """Exact parameter count, computed from shapes without allocating weights."""
    return Model(cfg, meta=True).num_params()


def rwkv_portion(cfg: ModelConfig):
    """Predicate selecting embeddings, the recurrent stack below the tap and W_KD."""
    split = cfg.split

    def pred(name: str) -> bool:
        if name in ("emb", "cache.W_KD") or name.startswith("ln0."):
            return True
        if name.startswith("blocks."):
            return int(name.split(".")[1]) < split
        return False

    return pred
