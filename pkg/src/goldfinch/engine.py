"""Two-phase inference: recurrent pre-fill of the compressed key cache, then decode.

Phase (a) runs only the embeddings and the recurrent layers below the tap,
in fixed-size blocks, appending one compressed key per position.  Phase (b)
pushes the last ``2G - 1`` positions through the whole model in one call so
every GOLD-side token-shift state is valid at the final position.  Decoding
then advances one token at a time, re-deriving keys and values from the
cache (optionally block by block).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cache import CompressedKeyCache
from .finch import WkvState
from .model import LayerState, Model
from .tensor import ContractError, Tensor

SESSION_MAGIC = b"GFSS"
SESSION_VERSION = 1


@dataclass
class SessionState:
    layers: list[LayerState]
    cache: CompressedKeyCache | None
    length: int = 0
    last_logits: np.ndarray | None = None
    token_ids: list[int] = field(default_factory=list)  # only used without a key cache

    def copy(self) -> "SessionState":
        return SessionState(
            layers=[s.copy() for s in self.layers],
            cache=None if self.cache is None else self.cache.copy(),
            length=self.length,
            last_logits=None if self.last_logits is None else self.last_logits.copy(),
            token_ids=list(self.token_ids),
        )

    # -- snapshot: GFKC cache section followed by raw state tensors ----------

    def to_bytes(self) -> bytes:
        from .io import write_tensor_records

        buf = io.BytesIO()
        buf.write(SESSION_MAGIC)
        buf.write(struct.pack("<IQ", SESSION_VERSION, self.length))
        buf.write(struct.pack("<B", self.cache is not None))
        if self.cache is not None:
            buf.write(self.cache.to_bytes())
        write_tensor_records(buf, self._tensors())
        return buf.getvalue()

    def _tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, s in enumerate(self.layers):
            if isinstance(s.att, WkvState):
                out[f"{i}.wkv"] = s.att.S.data
                out[f"{i}.att_shift"] = s.att.shift.data
            else:
                out[f"{i}.att_shift"] = s.att.data
            out[f"{i}.ffn_shift"] = s.ffn.data
        if self.last_logits is not None:
            out["last_logits"] = self.last_logits
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "SessionState":
        from .io import read_tensor_records

        if data[:4] != SESSION_MAGIC:
            raise ValueError("not a session snapshot (bad magic)")
        version, length = struct.unpack_from("<IQ", data, 4)
        if version != SESSION_VERSION:
            raise ValueError(f"unsupported session version {version}")
        pos = 4 + struct.calcsize("<IQ")
        (has_cache,) = struct.unpack_from("<B", data, pos)
        pos += 1
        cache = None
        if has_cache:
            cache, pos = CompressedKeyCache.from_bytes(data, pos)
        tensors, _ = read_tensor_records(data, pos)
        n_layers = 1 + max(int(k.split(".")[0]) for k in tensors if k[0].isdigit())
        layers = []
        for i in range(n_layers):
            if f"{i}.wkv" in tensors:
                att = WkvState(S=Tensor(tensors[f"{i}.wkv"]), shift=Tensor(tensors[f"{i}.att_shift"]))
            else:
                att = Tensor(tensors[f"{i}.att_shift"])
            layers.append(LayerState(att=att, ffn=Tensor(tensors[f"{i}.ffn_shift"])))
        return cls(layers=layers, cache=cache, length=length, last_logits=tensors.get("last_logits"))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SessionState":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass
class Sampler:
    kind: str = "greedy"  # greedy | temperature | top_k
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        z = np.asarray(logits, dtype=np.float64)
        if self.kind == "greedy" or self.temperature == 0:
            p = np.zeros_like(z)
            p[int(np.argmax(z))] = 1.0
            return p
        z = z / self.temperature
        if self.kind == "top_k" and 0 < self.top_k < len(z):
            cut = np.partition(z, -self.top_k)[-self.top_k]
            z = np.where(z >= cut, z, -np.inf)
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def sample(self, logits: np.ndarray) -> int:
        if self.kind == "greedy" or self.temperature == 0 or (self.kind == "top_k" and self.top_k == 1):
            return int(np.argmax(logits))
        return int(self.rng.choice(len(logits), p=self.probabilities(logits)))


def tail_length(n_gold: int, n_tokens: int) -> int:
    """Positions that must pass through the full model at the end of pre-fill."""
    if n_gold == 0:
        return 0
    return min(n_tokens, 2 * n_gold - 1)


class InferenceEngine:
    def __init__(self, model: Model, block_size: int = 256, prefill_block: int = 128):
        if model.cfg.variant not in ("goldfinch", "finch_c2", "finch"):
            raise ContractError(f"the inference engine serves recurrent/GOLD models, not {model.cfg.variant!r}")
        self.model = model
        self.cfg = model.cfg
        self.block_size = block_size
        self.prefill_block = prefill_block

    # -- state ----------------------------------------------------------------

    def new_session(self) -> SessionState:
        cache = None
        if self.cfg.n_gold:
            cache = CompressedKeyCache(self.cfg.d_compressed, self.cfg.np_dtype)
        return SessionState(layers=self.model.zero_states(1), cache=cache)

    # -- phase (a) --------------------------------------------------------------

    def prefill_recurrent(self, state: SessionState, token_ids) -> Tensor | None:
        """Advance embeddings + recurrent layers over ``token_ids`` in fixed-size blocks.

        Appends compressed keys to the cache and returns the residual at the tap
        for the last position (``None`` for empty input).
        """
        m = self.model
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        last = None
        for start in range(0, len(ids), self.prefill_block):
            blk = ids[start:start + self.prefill_block]
            x = m.embed(blk[None])
            for i in range(m.split):
                x, state.layers[i] = m.blocks[i].forward(x, state.layers[i])
            if state.cache is not None:
                state.cache.append(blk, m.compress(x).data[0])
            else:
                state.token_ids.extend(int(t) for t in blk)
            last = Tensor(x.data[:, -1:].copy())
            state.length += len(blk)
        return last

    # -- cache access ---------------------------------------------------------

    def _rows(self, cache: CompressedKeyCache):
        m = self.model
        ids = cache.token_ids
        c_all = cache.c
        dt = self.cfg.np_dtype
        D = self.cfg.d_model

        def rows(start: int, stop: int):
            x0 = m.embed(ids[start:stop][None])
            kD = m.decompress(x0, Tensor(c_all[None, start:stop]))
            if start == 0:
                zero = Tensor(np.zeros((1, D), dt))
                return x0, kD, zero, zero
            x0_b = m.embed(ids[start - 1:start][None])
            kD_b = m.decompress(x0_b, Tensor(c_all[None, start - 1:start]))
            return x0, kD, Tensor(x0_b.data[:, 0]), Tensor(kD_b.data[:, 0])

        return rows

    def _gold_ctx(self, cache: CompressedKeyCache, q_offset: int) -> dict:
        n = len(cache)
        rows = self._rows(cache)
        if self.block_size >= n:
            # decompress once per call, shared by every GOLD layer
            x0, kD, _, _ = rows(0, n)
            return {"x0": x0, "kD": kD, "q_offset": q_offset}
        return {"rows": rows, "n_keys": n, "q_offset": q_offset, "block": self.block_size}

    # -- public API -----------------------------------------------------------

    def prefill(self, token_ids, state: SessionState | None = None) -> SessionState:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if len(ids) == 0:
            raise ContractError("prefill needs at least one token")
        if state is not None and state.length:
            raise ContractError("prefill starts a fresh session; use decode_step to extend one")
        m, cfg = self.model, self.cfg
        state = state or self.new_session()
        if cfg.n_gold == 0:
            tap = self.prefill_recurrent(state, ids)
            state.last_logits = m.logits(tap).data[0, -1]
            return state

        tail = tail_length(cfg.n_gold, len(ids))
        p0 = len(ids) - tail
        tap_before = self.prefill_recurrent(state, ids[:p0]) if p0 else None
        snapshot = [s.copy() for s in state.layers[:m.split]]
        self.prefill_recurrent(state, ids[p0:])

        # phase (b): one parallel call over the tail, starting from the snapshot
        x = m.embed(ids[p0:][None])
        for i in range(m.split):
            x, _ = m.blocks[i].forward(x, snapshot[i])
        ctx = self._gold_ctx(state.cache, p0)
        for g, block in enumerate(m.blocks[m.split:]):
            layer = m.split + g
            st = block.zero_state(1, cfg)
            if g == 0 and tap_before is not None:
                # the first GOLD sub-layer's predecessor input is known exactly
                st.att = Tensor(block.norm1(tap_before).data[:, 0])
            x, state.layers[layer] = block.forward(x, st, ctx)
        state.last_logits = None
        return state

    def decode_step(self, state: SessionState, token_id: int) -> tuple[np.ndarray, SessionState]:
        """Feed one token; returns next-token logits ``[V]``.  ``state`` is updated in place."""
        m = self.model
        x = m.embed(np.array([[int(token_id)]]))
        for i in range(m.split):
            x, state.layers[i] = m.blocks[i].forward(x, state.layers[i])
        if state.cache is not None:
            state.cache.append([int(token_id)], m.compress(x).data[0])
            ctx = self._gold_ctx(state.cache, state.length)
            for i in range(m.split, len(m.blocks)):
                x, state.layers[i] = m.blocks[i].forward(x, state.layers[i], ctx)
        else:
            state.token_ids.append(int(token_id))
        state.length += 1
        logits = m.logits(x).data[0, -1].copy()
        state.last_logits = logits
        return logits, state

    def start(self, prompt) -> SessionState:
        """Pre-fill all but the last prompt token, then decode it to obtain next-token logits."""
        ids = np.asarray(prompt, dtype=np.int64).reshape(-1)
        if len(ids) == 0:
            raise ContractError("empty prompt")
        state = self.prefill(ids[:-1]) if len(ids) > 1 else self.new_session()
        self.decode_step(state, ids[-1])
        return state

    def generate(self, state: SessionState, steps: int, sampler: Sampler | None = None):
        """Sample ``steps`` tokens; returns ``(tokens, log_probs)`` of the sampled ids."""
        if steps < 1:
            raise ContractError("steps must be >= 1")
        if state.last_logits is None:
            raise ContractError("session has no pending logits; build it with start() or decode_step()")
        sampler = sampler or Sampler()
        out, logps = [], []
        for step in range(steps):
            logits = state.last_logits
            tok = sampler.sample(logits)
            z = logits.astype(np.float64)
            lse = z.max() + np.log(np.exp(z - z.max()).sum())
            out.append(tok)
            logps.append(float(z[tok] - lse))
            if step < steps - 1:
                self.decode_step(state, tok)
        return out, logps


def phase_a_profile(engine: InferenceEngine, n_tokens: int, repeats: int = 5, seed: int = 0):
    """Median per-token wall time of phase (a) and the peak live activation bytes it needs."""
    import time

    rng = np.random.default_rng(seed)
    ids = rng.integers(0, engine.cfg.vocab_size, size=n_tokens)
    times, peak = [], 0
    for _ in range(repeats):
        state = engine.new_session()
        with T.activation_meter() as meter:
            t0 = time.perf_counter()
            engine.prefill_recurrent(state, ids)
            times.append((time.perf_counter() - t0) / n_tokens)
        peak = max(peak, meter.peak)
    return float(np.median(times)), peak
