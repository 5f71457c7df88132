"""Self-verification suites: prefill/decode equivalence, gradients, causality."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import VARIANTS, ModelConfig
from .engine import InferenceEngine
from .model import Model
from .train import GRAD_MODULES, AdamW, LRSchedule, MQARConfig, evaluate, grad_check, mqar_batches, train_step

SUITES = ("equivalence", "grad", "causality")
EQUIV_SHAPES = ((6, 128, 64), (9, 192, 64))  # (n_layer, d_model, head_size); G = L/3
EQUIV_TOL = {"float32": 1e-4, "float64": 1e-9}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    details: list[str] = field(default_factory=list)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: worst={self.worst:.3g}"


def random_model(cfg: ModelConfig, scale: float = 0.1, seed: int = 0) -> Model:
    """A model with every parameter jittered away from its (partly zero) initial value."""
    m = Model(cfg)
    m.store.perturb(scale, seed=seed)
    return m


def equivalence_case(cfg: ModelConfig, tokens: np.ndarray, split: int, decode: int = 4,
                     block_size: int = 256, seed: int = 0) -> float:
    """Max-abs gap between parallel-forward logits and prefill(tokens[:split]) + decode steps."""
    model = random_model(cfg, seed=seed)
    ref = model.forward(tokens[None]).data[0]
    engine = InferenceEngine(model, block_size=block_size, prefill_block=64)
    state = engine.prefill(tokens[:split])
    worst = 0.0
    for pos in range(split, min(split + decode, len(tokens))):
        logits, _ = engine.decode_step(state, tokens[pos])
        worst = max(worst, float(np.abs(logits.astype(np.float64) - ref[pos]).max()))
    return worst


def equivalence_suite(n_cases: int = 20, seed: int = 0, dtypes=("float32", "float64"),
                      min_len: int = 33, max_len: int = 257) -> SuiteResult:
    rng = np.random.default_rng(seed)
    details, ok, worst_ratio = [], True, 0.0
    for i in range(n_cases):
        L, D, H = EQUIV_SHAPES[i % len(EQUIV_SHAPES)]
        dtype = dtypes[(i // len(EQUIV_SHAPES)) % len(dtypes)]
        n = int(rng.integers(min_len, max_len + 1))
        cfg = ModelConfig(n_layer=L, d_model=D, head_size=H, vocab_size=256, ctx_len=max_len,
                          dtype=dtype, seed=int(rng.integers(1 << 30)))
        tokens = rng.integers(0, cfg.vocab_size, size=n)
        split = int(rng.integers(1, n))
        block = int(rng.choice([16, 64, 256]))
        err = equivalence_case(cfg, tokens, split, block_size=block, seed=i)
        tol = EQUIV_TOL[dtype]
        ok &= err <= tol
        worst_ratio = max(worst_ratio, err / tol)
        details.append(f"L{L}/D{D}/G{cfg.n_gold} {dtype} len={n} split={split} block={block}: {err:.3g} (tol {tol:g})")
    return SuiteResult("equivalence", ok, worst_ratio, details)


def grad_suite(modules=GRAD_MODULES, tol: float = 1e-4) -> SuiteResult:
    details, worst = [], 0.0
    for mod in modules:
        rep = grad_check(mod)
        worst = max(worst, rep.max_rel_error)
        details.append(f"{mod}: rel err {rep.max_rel_error:.3g} over {rep.n_checked} entries")
    return SuiteResult("grad", worst < tol, worst, details)


def causality_trials(variant: str, trials: int = 100, seq_len: int = 24, seed: int = 0) -> int:
    """Number of trials whose logits before the perturbed position changed at all."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=variant, n_layer=3, d_model=32, head_size=16, vocab_size=64,
                      ctx_len=seq_len, cr=4, chunk_len=5, decay_rank=8, ddlerp_rank=8,
                      gold_lora_rank=8, loradapt_rank=8, second_value_rank=8,
                      rope_enabled=variant == "gptalpha", seed=seed)
    model = random_model(cfg, scale=0.2, seed=seed)
    failures = 0
    for _ in range(trials):
        tokens = rng.integers(0, cfg.vocab_size, size=seq_len)
        base = model.forward(tokens[None]).data[0]
        p = int(rng.integers(0, seq_len))
        bumped = tokens.copy()
        bumped[p] = (bumped[p] + 1 + rng.integers(cfg.vocab_size - 1)) % cfg.vocab_size
        out = model.forward(bumped[None]).data[0]
        if not np.array_equal(base[:p], out[:p]):
            failures += 1
    return failures


def causality_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    details, bad = [], 0
    for v in VARIANTS:
        f = causality_trials(v, trials, seed=seed)
        bad += f
        details.append(f"{v}: {trials - f}/{trials} trials bit-identical before the perturbation")
    return SuiteResult("causality", bad == 0, float(bad), details)


@dataclass
class RecallRun:
    variant: str
    steps: int
    train_accuracy: float
    eval_accuracy: float
    seconds: float


def mqar_recall(variant: str, d_model: int, seq_len: int, kv_pairs: int, max_steps: int,
                target: float | None = None, vocab: int = 256, n_layer: int = 6, batch_size: int = 8,
                lr: float = 1e-3, check_every: int = 25, eval_batches: int = 4, seed: int = 0,
                on_check=None) -> RecallRun:
    """Train on fresh MQAR batches; stop early once held-out accuracy reaches ``target``.

    Every ``check_every`` steps the held-out set is scored, but only when the
    latest training batch already clears ``target`` (scoring is not free).
    """
    import time

    cfg = ModelConfig(variant=variant, n_layer=n_layer, d_model=d_model, head_size=min(64, d_model),
                      vocab_size=vocab, ctx_len=seq_len, chunk_len=16, seed=seed)
    model = Model(cfg)
    data = MQARConfig(vocab_size=vocab, num_kv_pairs=kv_pairs, seq_len=seq_len, batch_size=batch_size, seed=seed + 1)
    held_out = MQARConfig(**{**data.__dict__, "seed": seed + 10_007})
    sched = LRSchedule(max(max_steps, 10_000), 10, lr, lr / 10)
    opt = AdamW(model.store)
    it = mqar_batches(data)
    t0 = time.perf_counter()
    acc, ev, step, ev_step = 0.0, 0.0, 0, -1
    while step < max_steps:
        _, acc = train_step(model, opt, [next(it)], sched(step))
        step += 1
        if step % check_every == 0 or step == max_steps:
            if target is None or acc >= target or step == max_steps:
                ev, ev_step = evaluate(model, mqar_batches(held_out), eval_batches), step
            if on_check:
                on_check(step, acc, ev)
            if target is not None and ev >= target:
                break
    if ev_step != step:
        ev = evaluate(model, mqar_batches(held_out), eval_batches)
    return RecallRun(variant, step, acc, ev, time.perf_counter() - t0)


def run_suite(name: str, quick: bool = False) -> list[SuiteResult]:
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, quick)]
    if name == "equivalence":
        return [equivalence_suite(n_cases=4 if quick else 20, max_len=80 if quick else 257)]
    if name == "grad":
        return [grad_suite(("finch_c2", "gold", "channel_mix", "compression") if quick else GRAD_MODULES)]
    if name == "causality":
        return [causality_suite(trials=10 if quick else 100)]
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")
