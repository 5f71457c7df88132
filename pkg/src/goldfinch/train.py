"""MQAR data, AdamW with selective decay, the LR schedule, the training loop and gradient checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import Model, rwkv_portion
from .params import ParamStore
from .tensor import ContractError, DimensionError, Tensor

# --------------------------------------------------------------------------
# MQAR


@dataclass
class MQARConfig:
    vocab_size: int = 8192
    num_kv_pairs: int = 16
    seq_len: int = 256
    num_queries: int | None = None  # None: fill the rest of the sequence with queries
    batch_size: int = 32
    seed: int = 0

    @property
    def key_range(self) -> tuple[int, int]:
        return 1, self.vocab_size // 2

    @property
    def value_range(self) -> tuple[int, int]:
        return self.vocab_size // 2, self.vocab_size

    @property
    def queries(self) -> int:
        if self.num_queries is not None:
            return self.num_queries
        return (self.seq_len + 1 - 2 * self.num_kv_pairs) // 2

    def validate(self) -> None:
        K, Q = self.num_kv_pairs, self.queries
        if K < 1 or Q < 1:
            raise ContractError("MQAR needs at least one key/value pair and one query")
        # raw stream is seq_len + 1 long (inputs and shifted targets)
        if 2 * K + 2 * Q > self.seq_len + 1:
            raise ContractError(f"2*{K} pairs + 2*{Q} queries do not fit seq_len {self.seq_len}")
        lo, hi = self.key_range
        if hi - lo < K:
            raise ContractError(f"key alphabet of size {hi - lo} too small for {K} distinct keys")


@dataclass
class MQARBatch:
    tokens: np.ndarray  # [B, T]
    targets: np.ndarray  # [B, T]
    loss_mask: np.ndarray  # [B, T] bool


def mqar_generate(cfg: MQARConfig, rng: np.random.Generator | None = None) -> MQARBatch:
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    B, K, Q, N = cfg.batch_size, cfg.num_kv_pairs, cfg.queries, cfg.seq_len
    raw = np.zeros((B, N + 1), dtype=np.int64)
    is_answer = np.zeros((B, N + 1), dtype=bool)
    klo, khi = cfg.key_range
    vlo, vhi = cfg.value_range
    for b in range(B):
        keys = klo + rng.choice(khi - klo, size=K, replace=False)
        vals = rng.integers(vlo, vhi, size=K)
        raw[b, 0:2 * K:2] = keys
        raw[b, 1:2 * K:2] = vals
        pick = rng.choice(K, size=Q, replace=Q > K)
        q0 = 2 * K
        raw[b, q0:q0 + 2 * Q:2] = keys[pick]
        raw[b, q0 + 1:q0 + 2 * Q:2] = vals[pick]
        is_answer[b, q0 + 1:q0 + 2 * Q:2] = True
    return MQARBatch(tokens=raw[:, :-1], targets=raw[:, 1:], loss_mask=is_answer[:, 1:])


def mqar_batches(cfg: MQARConfig) -> Iterable[MQARBatch]:
    rng = np.random.default_rng(cfg.seed)
    while True:
        yield mqar_generate(cfg, rng)


def lm_batch(tokens: np.ndarray) -> MQARBatch:
    """Next-token prediction on every position of ``tokens[:, :-1]``."""
    tokens = np.asarray(tokens)
    return MQARBatch(tokens[:, :-1], tokens[:, 1:], np.ones(tokens[:, 1:].shape, bool))


# --------------------------------------------------------------------------
# schedule and optimiser


@dataclass
class LRSchedule:
    total_steps: int
    warmup_steps: int = 10
    lr_init: float = 3e-5
    lr_final: float = 1e-5

    def __call__(self, step: int) -> float:
        return lr_at(step, self.warmup_steps, self.lr_init, self.lr_final, self.total_steps)


def lr_at(step: int, warmup_steps: int = 10, lr_init: float = 3e-5, lr_final: float = 1e-5,
          total_steps: int = 1000) -> float:
    if step < 0:
        raise ContractError("step must be >= 0")
    if step < warmup_steps:
        return lr_init * step / warmup_steps
    if step >= total_steps:
        return lr_final
    frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    store: ParamStore
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in self.store.items():
            entry = self.store.entry(name)
            if entry.frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(f"{name}: grad {g.shape} vs param {p.data.shape}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if entry.decay_eligible:
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)


# --------------------------------------------------------------------------
# loop


class DivergenceError(RuntimeError):
    pass


def loss_and_accuracy(model: Model, batch: MQARBatch, normalizer: float | None = None):
    mask = batch.loss_mask
    logits = model.forward(batch.tokens, select=mask)
    targets = batch.targets[mask]
    loss = T.cross_entropy(logits, targets, normalizer=normalizer)
    correct = int((logits.data.argmax(axis=1) == targets).sum())
    return loss, correct, int(mask.sum())


def train_step(model: Model, opt: AdamW, micro_batches: list[MQARBatch], lr: float) -> tuple[float, float]:
    """One optimiser step over accumulated micro-batches; returns (loss, masked accuracy)."""
    store = model.store
    store.zero_grad()
    total = sum(int(b.loss_mask.sum()) for b in micro_batches)
    if total == 0:
        raise ContractError("batch has no positions to train on")
    loss_sum, correct = 0.0, 0
    for b in micro_batches:
        with T.Tape() as tape:
            loss, c, _ = loss_and_accuracy(model, b, normalizer=total)
            tape.backward(loss)
        loss_sum += float(loss.data)
        correct += c
    if not math.isfinite(loss_sum):
        raise DivergenceError(f"non-finite loss {loss_sum} at step {opt.step_count + 1}")
    opt.step(lr)
    return loss_sum, correct / total


@dataclass
class TrainResult:
    history: list[dict]
    steps: int

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["masked_accuracy"] if self.history else 0.0


def train(model: Model, batches: Iterable[MQARBatch], schedule: Callable[[int], float], steps: int,
          freeze: str | None = None, accum: int = 1, csv_path=None, log_every: int = 1,
          stop_accuracy: float | None = None, on_log: Callable[[dict], None] | None = None) -> TrainResult:
    if freeze == "rwkv-portion":
        model.store.freeze(rwkv_portion(model.cfg))
    elif freeze not in (None, "", "none"):
        raise ContractError(f"unknown freeze spec {freeze!r}")
    opt = AdamW(model.store)
    it = iter(batches)
    history: list[dict] = []
    writer = None
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss", "masked_accuracy"])
        for step in range(steps):
            lr = schedule(step)
            loss, acc = train_step(model, opt, [next(it) for _ in range(accum)], lr)
            row = {"step": step + 1, "lr": lr, "loss": loss, "masked_accuracy": acc}
            if (step + 1) % log_every == 0 or step + 1 == steps:
                history.append(row)
                if writer:
                    writer.writerow([row["step"], repr(lr), repr(loss), repr(acc)])
                if on_log:
                    on_log(row)
            if stop_accuracy is not None and acc >= stop_accuracy:
                if not history or history[-1] is not row:
                    history.append(row)
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(history, history[-1]["step"] if history else 0)


def evaluate(model: Model, batches: Iterable[MQARBatch], n: int = 1) -> float:
    """Masked accuracy over ``n`` fresh batches (no tape, no gradients)."""
    it = iter(batches)
    correct = count = 0
    for _ in range(n):
        _, c, m = loss_and_accuracy(model, next(it))
        correct += c
        count += m
    return correct / max(count, 1)


# --------------------------------------------------------------------------
# gradient checking

GRAD_MODULES = ("finch_c2", "gold", "gptalpha", "channel_mix", "compression", "goldfinch2")


def _tiny_cfg(**kw) -> ModelConfig:
    base = dict(n_layer=2, d_model=16, head_size=8, vocab_size=11, cr=4, decay_rank=4, ddlerp_rank=4,
                gold_lora_rank=4, loradapt_rank=4, second_value_rank=4, chunk_len=3,
                dtype="float64", seed=7, gold_fraction="1/2")
    base.update(kw)
    return ModelConfig(**base)


def _module_objective(module_id: str, rng: np.random.Generator):
    """Build a small float64 instance; returns (store, f) with f() -> scalar Tensor."""
    from .attention import GoldAttention, GptAlphaAttention
    from .cache import CacheParams, compress, decompress_tokencat
    from .channel_mix import ChannelMix
    from .finch import FinchC2TimeMix, WkvState

    Tn = 7
    if module_id == "goldfinch2":
        cfg = _tiny_cfg(rope_enabled=True, d_model=8, head_size=4, cr=2)
        model = Model(cfg)
        store = model.store
        ids = rng.integers(0, cfg.vocab_size, size=(1, Tn))
        targets = rng.integers(0, cfg.vocab_size, size=(Tn,))

        def f():
            return T.cross_entropy(model.forward(ids).reshape(Tn, cfg.vocab_size), targets)
        return store, f

    cfg = _tiny_cfg(rope_enabled=module_id == "gold")
    D = cfg.d_model
    store = ParamStore(np.float64, seed=3)
    x = Tensor(rng.normal(size=(2, Tn, D)))
    shift = Tensor(rng.normal(size=(2, D)))
    if module_id == "finch_c2":
        mod = FinchC2TimeMix(cfg, store, "att", 0)
        S0 = Tensor(rng.normal(size=(2, D // cfg.head_size, cfg.head_size, cfg.head_size)) * 0.3)

        def run():
            return mod.forward(x, WkvState(S=S0, shift=shift))[0]
    elif module_id == "gold":
        mod = GoldAttention(cfg, store, "att", 1)
        x0 = Tensor(rng.normal(size=(2, Tn, D)))
        kD = Tensor(rng.normal(size=(2, Tn, D)))

        def run():
            return mod.forward(x, shift, x0, kD, 0)
    elif module_id == "gptalpha":
        mod = GptAlphaAttention(cfg, store, "att", 1)

        def run():
            return mod.forward(x, shift)
    elif module_id == "channel_mix":
        mod = ChannelMix(cfg, store, "ffn", 0)

        def run():
            return mod.forward(x, shift)[0]
    elif module_id == "compression":
        p = CacheParams.create(cfg, store)
        x0 = Tensor(rng.normal(size=(2, Tn, D)))

        def run():
            return decompress_tokencat(x0, compress(x, p), p)
    else:
        raise ContractError(f"unknown module {module_id!r}; expected one of {GRAD_MODULES}")
    R = rng.normal(size=(2, Tn, D))

    def f():
        return T.sum(run() * Tensor(R))
    return store, f


@dataclass
class GradReport:
    module: str
    max_rel_error: float
    per_tensor: dict[str, float]
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(module_id: str, step: float = 1e-5, seed: int = 0, perturb: float = 0.2) -> GradReport:
    """Central differences over every parameter element versus the tape gradient.

    Parameters are jittered first so zero-initialised output projections do not
    hide upstream gradients.  The error per tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` where
    ``floor`` is 1e-3 of the largest analytic entry in the module, so tensors
    whose true gradient is identically zero (e.g. a bias shared by every key
    under softmax) are judged on an absolute scale.
    """
    rng = np.random.default_rng(seed)
    store, f = _module_objective(module_id, rng)
    if store.dtype != np.float64:
        raise ContractError("grad_check runs in 64-bit mode")
    store.perturb(perturb, seed=seed + 1)
    store.zero_grad()
    with T.Tape() as tape:
        tape.backward(f())
    per: dict[str, float] = {}
    n = 0
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in store.items()}
    floor = max(1e-3 * max(float(np.abs(g).max()) for g in grads.values()), 1e-12)
    for name, p in store.items():
        analytic = grads[name]
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        n += flat.size
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
        per[name] = float(np.abs(analytic - numeric).max() / scale)
    return GradReport(module_id, max(per.values()), per, n)
