import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goldfinch import tensor as T
from goldfinch.finch import FinchC2TimeMix, FinchTimeMix, WkvState, wkv_chunked, wkv_sequential
from goldfinch.params import ParamStore
from goldfinch.tensor import Tensor

from conftest import small_cfg


def wkv_inputs(rng, B=1, N=2, n_t=9, H=4, dtype=np.float64):
    r, k, v = (Tensor(rng.normal(size=(B, N, n_t, H)).astype(dtype)) for _ in range(3))
    log_w = Tensor(-np.exp(rng.normal(-1.0, 1.0, size=(B, N, n_t, H))).astype(dtype))
    S0 = Tensor(rng.normal(size=(B, N, H, H)).astype(dtype))
    return r, k, v, log_w, S0


def test_wkv_expansion_first_three_steps(rng):
    H = 3
    r, k, v, log_w, _ = wkv_inputs(rng, N=1, n_t=3, H=H)
    S0 = Tensor(np.zeros((1, 1, H, H)))
    _, _, states = wkv_sequential(r, k, v, log_w, S0, return_states=True)
    kk, vv, w = k.data[0, 0], v.data[0, 0], np.exp(log_w.data[0, 0])
    np.testing.assert_array_equal(states[0, 0, 0], 0.0)
    np.testing.assert_allclose(states[0, 0, 1], np.outer(kk[0], vv[0]), atol=1e-15)
    expect = np.diag(w[1]) @ np.outer(kk[0], vv[0]) + np.outer(kk[1], vv[1])
    np.testing.assert_allclose(states[0, 0, 2], expect, atol=1e-14)


def test_wkv_chunked_len1_is_exact(rng):
    args = wkv_inputs(rng)
    y0, S0 = wkv_sequential(*args)
    y1, S1 = wkv_chunked(*args, chunk_len=1)
    np.testing.assert_array_equal(y0.data, y1.data)
    np.testing.assert_array_equal(S0.data, S1.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 17), st.integers(0, 10_000))
def test_wkv_chunked_matches_sequential(n_t, chunk, seed):
    args = wkv_inputs(np.random.default_rng(seed), n_t=n_t)
    y0, S0 = wkv_sequential(*args)
    y1, S1 = wkv_chunked(*args, chunk_len=chunk)
    assert np.abs(y0.data - y1.data).max() <= 1e-10
    assert np.abs(S0.data - S1.data).max() <= 1e-10


def test_wkv_single_chunk_32bit(rng):
    args = wkv_inputs(rng, n_t=32, H=8, dtype=np.float32)
    y0, _ = wkv_sequential(*args)
    y1, _ = wkv_chunked(*args, chunk_len=32)
    assert np.abs(y0.data - y1.data).max() <= 1e-4


def test_wkv_chunked_gradients_match_sequential(rng):
    arrays = [a.data for a in wkv_inputs(rng, n_t=7)]
    grads = []
    for fn in (lambda *a: wkv_sequential(*a), lambda *a: wkv_chunked(*a, chunk_len=3)):
        ps = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with T.Tape() as tape:
            y, S = fn(*ps)
            tape.backward(T.sum(y * y) + T.sum(S))
        grads.append([p.grad for p in ps])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)


def _mixer(**kw):
    cfg = small_cfg(**kw)
    store = ParamStore(np.float64, seed=5)
    mix = FinchC2TimeMix(cfg, store, "att", 1)
    store.perturb(0.2, seed=9)
    return cfg, store, mix


@pytest.mark.parametrize("d, w", [(0.0, math.exp(-1)), (math.log(math.log(2)), 0.5)])
def test_decay_analytic_values(d, w):
    cfg, store, mix = _mixer()
    mix.lora_w.B.data[:] = 0
    mix.lora_w.lam.data[:] = d
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, cfg.d_model)))
    got, _ = mix.decay(x, x)
    np.testing.assert_allclose(got.data, w, rtol=1e-12)


def test_decay_strictly_inside_unit_interval():
    cfg, store, mix = _mixer()
    mix.lora_w.B.data[:] = 0
    mix.lora_w.lam.data[:] = -20.0
    x = Tensor(np.zeros((1, 1, cfg.d_model)))
    w, _ = mix.decay(x, x)
    assert np.all(w.data < 1.0)
    assert w.data[0, 0, 0] == pytest.approx(1 - 2.06e-9, abs=1e-11)
    mix.lora_w.lam.data[:] = 3.0
    w, _ = mix.decay(x, x)
    assert np.all(w.data > 0.0)


def test_key_scaling_flag():
    rng = np.random.default_rng(1)
    x, xp = (Tensor(rng.normal(size=(1, 3, 32))) for _ in range(2))
    _, _, on = _mixer()
    _, _, off = _mixer(key_decay_scaling_enabled=False)
    w = Tensor(np.full((1, 3, 32), 0.25))
    k_on = on.projections(x, xp, w)[1].data
    k_off = off.projections(x, xp, w)[1].data
    np.testing.assert_allclose(k_on, k_off * 0.75, rtol=1e-12)
    k_one = on.projections(x, xp, Tensor(np.ones((1, 3, 32))))[1].data
    np.testing.assert_array_equal(k_one, 0.0)


def test_second_value_reuses_value_matrix():
    cfg, store, mix = _mixer()
    assert "att.W_U" not in store  # no separate value matrix for u'
    mix.W_UU.data[:] = 0
    rng = np.random.default_rng(2)
    x, xp = (Tensor(rng.normal(size=(1, 3, 32))) for _ in range(2))
    u2 = mix.projections(x, xp, Tensor(np.full((1, 3, 32), 0.5)))[3].data
    from goldfinch import nn
    np.testing.assert_allclose(u2, (nn.ddlerp(x, xp, mix.ddlerp["u"]) @ mix.W_V).data, atol=1e-14)


def test_second_value_flag_removes_parameters():
    _, store, _ = _mixer(second_value_enabled=False)
    assert not any(n.endswith(("W_UD", "W_UU")) or "ddlerp_u" in n for n in store.names())


def test_no_gate_parameters():
    _, store, _ = _mixer()
    assert not any("W_G" in n or "gate" in n for n in store.names())


def test_zero_output_projection_gives_zero():
    cfg = small_cfg()
    mix = FinchC2TimeMix(cfg, ParamStore(np.float64), "att", 0)
    out, _ = mix.forward(Tensor(np.random.default_rng(3).normal(size=(2, 5, 32))))
    np.testing.assert_array_equal(out.data, 0.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 11), st.sampled_from(["float64", "float32"]))
def test_state_carry_matches_single_call(split, dtype):
    cfg, store, mix = _mixer(dtype=dtype)
    if dtype == "float32":
        store = ParamStore(np.float32, seed=5)
        mix = FinchC2TimeMix(cfg, store, "att", 1)
        store.perturb(0.2, seed=9)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 12, 32)).astype(cfg.np_dtype))
    full, S_full = mix.forward(x)
    a, st_a = mix.forward(x[:, :split])
    b, st_b = mix.forward(x[:, split:], st_a)
    tol = 1e-10 if dtype == "float64" else 1e-5
    assert np.abs(T.concat([a, b], axis=1).data - full.data).max() <= tol
    assert np.abs(st_b.S.data - S_full.S.data).max() <= tol


def test_constant_inputs_converge_to_fixed_point():
    # s = w s + (1 - w) v0 has fixed point v0 when keys are scaled by (1 - w)
    H, steps = 4, 400
    w = np.full(H, 0.9)
    k = Tensor(np.broadcast_to(1 - w, (1, 1, steps, H)).copy())
    v0 = np.array([0.5, -1.0, 2.0, 0.25])
    v = Tensor(np.broadcast_to(v0, (1, 1, steps, H)).copy())
    log_w = Tensor(np.broadcast_to(np.log(w), (1, 1, steps, H)).copy())
    _, S = wkv_sequential(Tensor(np.zeros((1, 1, steps, H))), k, v, log_w, Tensor(np.zeros((1, 1, H, H))))
    np.testing.assert_allclose(S.data[0, 0], np.broadcast_to(v0, (H, H)), atol=1e-12)


def test_state_bounded_by_value_magnitude():
    rng = np.random.default_rng(5)
    H = 8
    n_t = 10 * H
    w = rng.uniform(0.05, 0.999, size=(1, 1, n_t, H))
    k_pre = rng.uniform(-1, 1, size=(1, 1, n_t, H))
    v = rng.normal(size=(1, 1, n_t, H))
    _, _, states = wkv_sequential(Tensor(np.zeros_like(v)), Tensor(k_pre * (1 - w)), Tensor(v),
                                  Tensor(np.log(w)), Tensor(np.zeros((1, 1, H, H))), return_states=True)
    assert np.abs(states).max() <= np.abs(v).max() + 1e-12


def test_finch_baseline_state_carry():
    cfg = small_cfg(variant="finch")
    store = ParamStore(np.float64, seed=1)
    mix = FinchTimeMix(cfg, store, "att", 0)
    store.perturb(0.2, seed=2)
    x = Tensor(np.random.default_rng(6).normal(size=(1, 9, 32)))
    full, _ = mix.forward(x)
    a, st_a = mix.forward(x[:, :4])
    b, _ = mix.forward(x[:, 4:], st_a)
    np.testing.assert_allclose(T.concat([a, b], axis=1).data, full.data, atol=1e-10)
    assert isinstance(st_a, WkvState)
