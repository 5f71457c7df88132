"""Command-line entry point: ``goldfinch <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .cache import ARCHITECTURES, cache_bytes
from .config import ConfigError, ModelConfig, parse_kv
from .tensor import ContractError, DimensionError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TRAIN_KEYS = {
    "steps": int, "batch_size": int, "accum": int, "warmup_steps": int, "lr_init": float,
    "lr_final": float, "task": str, "num_kv_pairs": int, "seq_len": int, "num_queries": int,
    "data": str, "log_every": int, "data_seed": int,
}
TRAIN_DEFAULTS = {"steps": 100, "batch_size": 8, "accum": 1, "warmup_steps": 10, "lr_init": 3e-5,
                  "lr_final": 1e-5, "task": "mqar", "num_kv_pairs": 16, "seq_len": None,
                  "num_queries": None, "data": None, "log_every": 1, "data_seed": 0}


class UsageError(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob form: sha1 over ``b"blob <len>\\0" + data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict, seed: int,
                   outputs: list[Path], inputs: dict[str, bytes]) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "outputs": sorted(str(p.name) for p in outputs),
        "input_hashes": {k: git_blob_hash(v) for k, v in sorted(inputs.items())},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _config_dict(cfg: ModelConfig) -> dict:
    return {f.name: str(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def _parse_ids(text: str) -> list[int]:
    try:
        ids = [int(t) for t in text.replace(",", " ").split()]
    except ValueError as e:
        raise UsageError(f"--prompt-ids must be integers: {e}") from None
    if not ids:
        raise UsageError("--prompt-ids is empty")
    return ids


# --------------------------------------------------------------------------
# commands


def _split_config(text: str) -> tuple[ModelConfig, dict]:
    raw = parse_kv(text)
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(raw) - model_fields - set(TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = ModelConfig.from_dict({k: v for k, v in raw.items() if k in model_fields})
    opts = dict(TRAIN_DEFAULTS)
    for k, v in raw.items():
        if k in TRAIN_KEYS:
            opts[k] = TRAIN_KEYS[k](v)
    if opts["seq_len"] is None:
        opts["seq_len"] = cfg.ctx_len
    return cfg, opts


def _load_tokens(path: str, seq_len: int) -> np.ndarray:
    p = Path(path)
    arr = np.load(p) if p.suffix == ".npy" else np.array(p.read_text().split(), dtype=np.int64)
    arr = np.asarray(arr, dtype=np.int64).reshape(-1)
    n = len(arr) // (seq_len + 1)
    if n == 0:
        raise UsageError(f"{path}: fewer than {seq_len + 1} tokens")
    return arr[: n * (seq_len + 1)].reshape(n, seq_len + 1)


def _lm_batches(rows: np.ndarray, batch_size: int, seed: int):
    from .train import lm_batch

    rng = np.random.default_rng(seed)
    while True:
        yield lm_batch(rows[rng.integers(0, len(rows), size=batch_size)])


def _run_training(cfg: ModelConfig, opts: dict, out: Path, freeze, argv, command, inputs) -> int:
    from .io import save_checkpoint
    from .model import Model
    from .train import LRSchedule, MQARConfig, evaluate, mqar_batches, train

    out.mkdir(parents=True, exist_ok=True)
    model = Model(cfg)
    if opts["task"] == "mqar":
        mcfg = MQARConfig(vocab_size=cfg.vocab_size, num_kv_pairs=opts["num_kv_pairs"], seq_len=opts["seq_len"],
                          num_queries=opts["num_queries"], batch_size=opts["batch_size"], seed=opts["data_seed"])
        batches = mqar_batches(mcfg)
    elif opts["task"] == "lm":
        if not opts["data"]:
            raise UsageError("task = lm needs data = <token file>")
        batches = _lm_batches(_load_tokens(opts["data"], opts["seq_len"]), opts["batch_size"], opts["data_seed"])
    else:
        raise UsageError(f"unknown task {opts['task']!r} (mqar | lm)")
    sched = LRSchedule(opts["steps"], opts["warmup_steps"], opts["lr_init"], opts["lr_final"])
    csv_path = out / "loss.csv"
    result = train(model, batches, sched, opts["steps"], freeze=freeze, accum=opts["accum"],
                   csv_path=csv_path, log_every=opts["log_every"],
                   on_log=lambda r: print(f"step {r['step']} loss {r['loss']:.4f} acc {r['masked_accuracy']:.4f}"))
    ckpt = out / "model.gfck"
    save_checkpoint(ckpt, model)
    outputs = [csv_path, ckpt]
    if opts["task"] == "mqar":
        eval_cfg = dataclasses.replace(mcfg, seed=mcfg.seed + 10_007)
        acc = evaluate(model, mqar_batches(eval_cfg), n=2)
        (out / "eval.json").write_text(json.dumps({"masked_accuracy": acc}, sort_keys=True) + "\n")
        outputs.append(out / "eval.json")
        print(f"eval masked_accuracy {acc:.4f}")
    write_manifest(out, command, argv, {"model": _config_dict(cfg), "train": opts, "freeze": freeze},
                   cfg.seed, outputs, inputs)
    print(f"wrote {ckpt} after {result.steps} steps")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    cfg, opts = _split_config(text)
    return _run_training(cfg, opts, Path(args.out), args.freeze, argv, "train", {"config": text.encode()})


def cmd_mqar(args, argv) -> int:
    cfg = ModelConfig(variant=args.variant, n_layer=args.layers, d_model=args.dmodel,
                      head_size=min(args.head_size, args.dmodel), vocab_size=args.vocab,
                      ctx_len=args.seq_len, seed=args.seed)
    opts = dict(TRAIN_DEFAULTS, steps=args.steps, batch_size=args.batch_size, lr_init=args.lr,
                lr_final=args.lr / 10, num_kv_pairs=args.kv_pairs, seq_len=args.seq_len,
                log_every=max(1, args.steps // 20), data_seed=args.seed)
    return _run_training(cfg, opts, Path(args.out), None, argv, "mqar", {})


def cmd_generate(args, argv) -> int:
    from .engine import InferenceEngine, Sampler
    from .io import load_checkpoint

    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    ids = _parse_ids(args.prompt_ids)
    if args.greedy or args.temperature == 0:
        sampler = Sampler("greedy")
    elif args.top_k:
        sampler = Sampler("top_k", args.temperature, args.top_k, args.seed)
    else:
        sampler = Sampler("temperature", args.temperature, 0, args.seed)
    engine = InferenceEngine(model, block_size=args.block_size)
    state = engine.start(ids)
    tokens, logps = engine.generate(state, args.steps, sampler)
    print(" ".join(map(str, tokens)))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        res = out / "generation.json"
        res.write_text(json.dumps({"prompt": ids, "tokens": tokens, "logprobs": logps}) + "\n")
        snap = out / "session.gfss"
        state.save(snap)
        write_manifest(out, "generate", argv, {"model": _config_dict(model.cfg), "sampler": sampler.kind},
                       args.seed, [res, snap], {"checkpoint": path.read_bytes()})
    return EXIT_OK


def cmd_prefill_bench(args, argv) -> int:
    from .engine import InferenceEngine, phase_a_profile
    from .io import load_checkpoint
    from .model import Model

    try:
        lens = [int(x) for x in args.lens.split(",") if x.strip()]
    except ValueError:
        raise UsageError("--lens expects comma-separated integers") from None
    if not lens or min(lens) < 1:
        raise UsageError("--lens needs positive lengths")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else Model(ModelConfig(seed=args.seed))
    engine = InferenceEngine(model, prefill_block=args.block)
    base = None
    print("tokens  us/token  ratio  peak_activation_bytes")
    for n in lens:
        t, peak = phase_a_profile(engine, n, args.repeats, args.seed)
        base = base or t
        print(f"{n:6d}  {t * 1e6:8.1f}  {t / base:5.2f}  {peak}")
    return EXIT_OK


def format_gib(n_bytes: float) -> str:
    gib = n_bytes / 2**30
    return f"{gib:.4g} GiB"


def cmd_cache_calc(args, argv) -> int:
    try:
        n = cache_bytes(args.arch, args.ctx, args.layers, args.dmodel, args.dhead, args.width_bytes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(format_gib(n))
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    from .verify import run_suite

    results = run_suite(args.suite, quick=args.quick)
    for r in results:
        if args.verbose:
            for d in r.details:
                print("  " + d)
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="goldfinch", description="GoldFinch hybrid language model toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--freeze", choices=["rwkv-portion"], default=None)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mqar", help="train and evaluate on multi-query associative recall")
    m.add_argument("--seq-len", type=int, required=True)
    m.add_argument("--kv-pairs", type=int, required=True)
    m.add_argument("--variant", default="goldfinch", choices=["goldfinch", "finch_c2", "finch", "gptalpha", "llama_lite"])
    m.add_argument("--layers", type=int, default=6)
    m.add_argument("--dmodel", type=int, default=128)
    m.add_argument("--head-size", type=int, default=64)
    m.add_argument("--vocab", type=int, default=8192)
    m.add_argument("--steps", type=int, default=200)
    m.add_argument("--batch-size", type=int, default=8)
    m.add_argument("--lr", type=float, default=1e-3)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="runs/mqar")
    m.set_defaults(func=cmd_mqar)

    g = sub.add_parser("generate", help="pre-fill a prompt and sample continuation ids")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt-ids", required=True, help='space or comma separated token ids, e.g. "1 2 3"')
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--top-k", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--block-size", type=int, default=256)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("prefill-bench", help="per-token phase-(a) pre-fill time and peak activation memory")
    b.add_argument("--lens", required=True, help="comma-separated prompt lengths")
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--block", type=int, default=128)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_prefill_bench)

    c = sub.add_parser("cache-calc", help="KV-cache size for an architecture")
    c.add_argument("--arch", required=True, help=f"one of: {', '.join(ARCHITECTURES)}")
    c.add_argument("--ctx", type=int, required=True)
    c.add_argument("--layers", type=int, required=True)
    c.add_argument("--dmodel", type=int, required=True)
    c.add_argument("--dhead", type=int, default=128)
    c.add_argument("--width-bytes", type=float, default=2)
    c.set_defaults(func=cmd_cache_calc)

    v = sub.add_parser("verify", help="run self-verification suites")
    v.add_argument("--suite", default="all", choices=["equivalence", "grad", "causality", "all"])
    v.add_argument("--quick", action="store_true", help="smaller case counts")
    v.add_argument("--verbose", "-v", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, ContractError, DimensionError, FileNotFoundError) as e:
        print(f"goldfinch {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
