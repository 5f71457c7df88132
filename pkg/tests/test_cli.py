import json

import pytest

from goldfinch.cli import main

TINY = """\
variant = goldfinch
n_layer = 3
d_model = 32
head_size = 16
vocab_size = 40
ctx_len = 24
cr = 4
chunk_len = 8
decay_rank = 8
ddlerp_rank = 8
gold_lora_rank = 8
loradapt_rank = 8
second_value_rank = 8
seed = 7
# training
steps = 4
batch_size = 2
num_kv_pairs = 3
lr_init = 1e-3
"""


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("arch, ctx, layers, dmodel, expected", [
    ("llama2", 262144, 32, 4096, "128 GiB"),
    ("yoco", 262144, 32, 4096, "4 GiB"),
    ("goldfinch", 262144, 32, 4096, "0.1255 GiB"),
])
def test_cache_calc(capsys, arch, ctx, layers, dmodel, expected):
    code, out, _ = run(["cache-calc", "--arch", arch, "--ctx", str(ctx), "--layers", str(layers),
                        "--dmodel", str(dmodel)], capsys)
    assert code == 0 and out.strip() == expected


def test_cache_calc_unknown_arch(capsys):
    code, _, err = run(["cache-calc", "--arch", "mamba", "--ctx", "8", "--layers", "1", "--dmodel", "8"], capsys)
    assert code == 2 and "unknown architecture" in err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["cache-calc", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    code, _, err = run(["train", "--config", "/nonexistent.cfg"], capsys)
    assert code == 2 and "not found" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    snaps = []
    for _ in range(2):
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        snaps.append({f.name: f.read_bytes() for f in out.iterdir()})
    return cfg, out, snaps


def test_train_writes_artifacts_and_manifest(trained):
    _, a, _ = trained
    for f in ("loss.csv", "model.gfck", "eval.json", "manifest.json"):
        assert (a / f).is_file(), f
    man = json.loads((a / "manifest.json").read_text())
    assert man["command"] == "train"
    assert set(man["outputs"]) >= {"loss.csv", "model.gfck"}
    assert "config" in man["input_hashes"]
    assert "time" not in json.dumps(man).lower()
    assert len((a / "loss.csv").read_text().splitlines()) == 5


def test_identical_runs_are_byte_identical(trained):
    _, _, (first, second) = trained
    assert set(first) == {"loss.csv", "model.gfck", "eval.json", "manifest.json"}
    assert first == second


def test_train_with_frozen_rwkv_portion(trained, tmp_path, capsys):
    cfg, _, _ = trained
    code, out, _ = run(["train", "--config", str(cfg), "--freeze", "rwkv-portion", "--out", str(tmp_path)], capsys)
    assert code == 0 and "wrote" in out


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TINY + "warp_factor = 9\n")
    code, _, err = run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "warp_factor" in err


def test_generate_from_checkpoint(trained, tmp_path, capsys):
    _, a, _ = trained
    ckpt = str(a / "model.gfck")
    argv = ["generate", "--checkpoint", ckpt, "--prompt-ids", "1 2 3 4 5", "--steps", "6", "--greedy"]
    code, out1, _ = run(argv + ["--out", str(tmp_path)], capsys)
    assert code == 0
    toks = [int(t) for t in out1.split()]
    assert len(toks) == 6 and all(0 <= t < 40 for t in toks)
    rec = json.loads((tmp_path / "generation.json").read_text())
    assert rec["tokens"] == toks and all(lp <= 0 for lp in rec["logprobs"])
    assert (tmp_path / "session.gfss").is_file()
    # blocked decode path yields the same greedy continuation
    _, out2, _ = run(argv + ["--block-size", "2"], capsys)
    assert out2 == out1
    code, out3, _ = run(["generate", "--checkpoint", ckpt, "--prompt-ids", "1,2,3", "--steps", "4",
                         "--top-k", "5", "--seed", "3"], capsys)
    assert code == 0 and len(out3.split()) == 4


def test_generate_steps_zero_is_usage_error(trained, capsys):
    _, a, _ = trained
    code, _, err = run(["generate", "--checkpoint", str(a / "model.gfck"), "--prompt-ids", "1 2",
                        "--steps", "0"], capsys)
    assert code == 2 and "steps" in err


def test_generate_bad_prompt(trained, capsys):
    _, a, _ = trained
    code, _, _ = run(["generate", "--checkpoint", str(a / "model.gfck"), "--prompt-ids", "x y",
                      "--steps", "2"], capsys)
    assert code == 2


def test_prefill_bench(trained, capsys):
    _, a, _ = trained
    code, out, _ = run(["prefill-bench", "--lens", "16,32", "--checkpoint", str(a / "model.gfck"),
                        "--repeats", "1", "--block", "8"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 3 and lines[1].split()[0] == "16"


def test_mqar_command(tmp_path, capsys):
    code, out, _ = run(["mqar", "--seq-len", "16", "--kv-pairs", "3", "--layers", "3", "--dmodel", "32",
                        "--head-size", "16", "--vocab", "40", "--steps", "2", "--batch-size", "2",
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    acc = json.loads((tmp_path / "eval.json").read_text())["masked_accuracy"]
    assert 0.0 <= acc <= 1.0


def test_verify_quick(capsys):
    code, out, _ = run(["verify", "--suite", "causality", "--quick"], capsys)
    assert code == 0 and out.startswith("PASS causality")
