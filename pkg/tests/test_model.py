import re
from fractions import Fraction

import numpy as np
import pytest

from goldfinch import tensor as T
from goldfinch.config import ConfigError, ModelConfig, parse_kv
from goldfinch.model import Model, param_count, rwkv_portion

from conftest import jittered, small_cfg


def test_layout_two_thirds_recurrent():
    cfg = ModelConfig(n_layer=6)
    assert cfg.n_gold == 2 and cfg.split == 4
    assert cfg.layer_kinds() == ["finch_c2"] * 4 + ["gold"] * 2
    assert ModelConfig(n_layer=6, gold_fraction="1/2").n_gold == 3
    assert ModelConfig(n_layer=12, gold_fraction=Fraction(1, 6)).n_gold == 2
    assert ModelConfig(variant="finch_c2").n_gold == 0


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=100, head_size=64)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=128, cr=3)
    with pytest.raises(ConfigError):
        ModelConfig(variant="mamba")


def test_config_text_roundtrip():
    cfg = small_cfg(gold_fraction="1/2", rope_enabled=True, rope_interp_scale=0.25)
    back = ModelConfig.from_text("# comment\n" + cfg.to_text())
    assert back == cfg
    assert parse_kv("a = 1  # trailing\n\n b=x")["b"] == "x"


def test_registry_has_one_global_compression_pair():
    for L in (3, 6, 9):
        names = Model(small_cfg(n_layer=L, gold_fraction="2/3"), meta=True).store.names()
        assert sum(n.endswith("W_KD") for n in names) == 1
        assert sum(n.endswith("W_KU") for n in names) == 1
    names = Model(small_cfg(variant="finch_c2"), meta=True).store.names()
    assert not any("W_KD" in n or "W_KU" in n for n in names)


def test_registry_audit_goldfinch_symbols():
    m = Model(small_cfg(n_layer=3), meta=True)
    names = set(m.store.names())
    per_c2 = {"ddlerp_d", "ddlerp_r", "ddlerp_k", "ddlerp_v", "ddlerp_u", "lora_w", "W_R", "W_K", "W_V",
              "W_UD", "W_UU", "ln_x", "W_O"}
    per_gold = {"ddlerp_q", "W_Q", "mu_x", "lora_k", "lora_v", "loradapt_k", "loradapt_v", "ln_q",
                "ln_k", "ln_v", "ln_o", "W_O"}
    per_ffn = {"mu_r", "mu_k", "W_R", "W_K", "W_V"}
    for i, kind in enumerate(m.cfg.layer_kinds()):
        att = {n.split(".")[3] for n in names if n.startswith(f"blocks.{i}.att.")}
        assert att == (per_c2 if kind == "finch_c2" else per_gold), (i, att)
        ffn = {n.split(".")[3] for n in names if n.startswith(f"blocks.{i}.ffn.")}
        assert ffn == per_ffn
    assert {"emb", "head", "cache.W_KD", "cache.W_KU", "cache.gain"} <= names


def test_decay_eligibility_policy():
    m = Model(small_cfg(), meta=True)
    for name in m.store.names():
        e = m.store.entry(name)
        is_lora = bool(re.search(r"\.(lora(_\w)?|loradapt_\w)\.|\.W_U[DU]$", name))
        if is_lora or name.startswith("cache.W_K"):
            assert not e.decay_eligible, name
        elif e.tensor.ndim == 1:
            assert not e.decay_eligible, name
        else:
            assert e.decay_eligible, name


def test_embedding_rows():
    m = Model(small_cfg())
    assert np.linalg.norm(m.emb.data, axis=1).max() <= 1e-4 * np.sqrt(m.cfg.d_model)
    x0 = m.embed(np.array([[3, 7, 3]])).data
    np.testing.assert_array_equal(x0[0, 0], x0[0, 2])
    with pytest.raises(T.ContractError):
        m.embed(np.array([[m.cfg.vocab_size]]))


def test_param_counts_table_two():
    def cfg(v):
        return ModelConfig(variant=v, n_layer=24, d_model=2048, vocab_size=65536)
    gf, fi, ll = (param_count(cfg(v)) for v in ("goldfinch", "finch", "llama_lite"))
    assert gf < fi
    assert abs(gf / 1.45e9 - 1) <= 0.10
    assert abs(fi / 1.60e9 - 1) <= 0.10
    assert abs(ll / 1.47e9 - 1) <= 0.10


def test_doubling_width_roughly_quadruples_matrices():
    a = param_count(ModelConfig(n_layer=4, d_model=512, vocab_size=16))
    b = param_count(ModelConfig(n_layer=4, d_model=1024, vocab_size=16))
    assert 3.3 < b / a < 4.1


@pytest.mark.parametrize("variant", ["goldfinch", "finch_c2", "finch", "gptalpha", "llama_lite"])
def test_forward_shapes_and_selection(variant):
    m = jittered(small_cfg(variant=variant, rope_enabled=variant == "gptalpha"))
    ids = np.random.default_rng(0).integers(0, 50, size=(2, 9))
    out = m.forward(ids).data
    assert out.shape == (2, 9, 50)
    sel = np.zeros((2, 9), bool)
    sel[1, 3] = sel[0, 8] = True
    np.testing.assert_allclose(m.forward(ids, select=sel).data, out[sel], atol=1e-12)


def test_tap_and_x0_reconstruction():
    m = jittered(small_cfg(n_layer=3))
    ids = np.random.default_rng(1).integers(0, 50, size=(1, 7))
    _, ex = m.hidden(ids)
    np.testing.assert_array_equal(ex["x0"].data, m.embed(ids).data)
    np.testing.assert_array_equal(ex["c"].data, (ex["tap"] @ m.cache_params.W_KD).data)
    np.testing.assert_array_equal(m.decompress(m.embed(ids), ex["c"]).data, ex["kD"].data)


def test_rwkv_portion_selects_embeddings_recurrent_layers_and_compressor():
    m = Model(small_cfg(n_layer=3), meta=True)
    pred = rwkv_portion(m.cfg)
    chosen = {n for n in m.store.names() if pred(n)}
    assert "emb" in chosen and "ln0.gamma" in chosen and "cache.W_KD" in chosen
    assert "cache.W_KU" not in chosen and "head" not in chosen
    assert all(int(n.split(".")[1]) < m.cfg.split for n in chosen if n.startswith("blocks."))
    assert any(n.startswith("blocks.1.") for n in chosen)
    assert not any(n.startswith("blocks.2.") for n in chosen)


def test_frozen_tensors_receive_no_gradient():
    m = jittered(small_cfg(n_layer=3))
    m.store.freeze(rwkv_portion(m.cfg))
    ids = np.random.default_rng(2).integers(0, 50, size=(1, 6))
    with T.Tape() as tape:
        loss = T.cross_entropy(T.reshape(m.forward(ids), (6, 50)), ids[0])
        tape.backward(loss)
    for name, p in m.store.items():
        if m.store.entry(name).frozen:
            assert p.grad is None, name
    assert m.store["head"].grad is not None
