import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goldfinch import tensor as T
from goldfinch.tensor import ContractError, DimensionError, Tape, Tensor

from conftest import fd_grad


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_grad(build, *arrays, tol=1e-6):
    """Compare tape gradients of sum(build(...) * R) against central differences."""
    ps = [param(a) for a in arrays]
    out_shape = build(*ps).shape
    R = np.random.default_rng(0).normal(size=out_shape)

    def scalar():
        return float((build(*ps).data * R).sum())

    with Tape() as tape:
        loss = T.sum(build(*ps) * Tensor(R))
        tape.backward(loss)
    for p in ps:
        num = fd_grad(scalar, p.data)
        assert np.allclose(p.grad, num, atol=tol, rtol=tol), (p.grad, num)


def test_quadratic_loss_gradient_and_steps():
    p = param([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = T.sum(p * p) / 2.0
        steps = tape.backward(loss)
    np.testing.assert_array_equal(p.grad, p.data)
    assert steps == 3
    assert len(tape) == 0


def test_nothing_recorded_outside_tape():
    p = param([1.0, 2.0])
    y = p * 3.0
    assert not y.requires_grad
    with Tape() as tape:
        frozen = Tensor(np.ones(2))
        frozen * 2.0
        assert len(tape) == 0
        p * 2.0
        assert len(tape) == 1


def test_backward_needs_scalar_root():
    p = param([1.0, 2.0])
    with Tape() as tape:
        y = p * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)


def test_gradients_accumulate_until_zeroed():
    p = param([2.0])
    for _ in range(2):
        with Tape() as tape:
            tape.backward(T.sum(p * 3.0))
    np.testing.assert_allclose(p.grad, [6.0])
    p.zero_grad()
    assert p.grad is None


def test_broadcast_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


shapes = st.sampled_from([((3, 4), (4,)), ((2, 1, 4), (3, 4)), ((5,), ()), ((2, 3), (2, 1))])


@settings(max_examples=15, deadline=None)
@given(shapes, st.sampled_from(["add", "sub", "mul", "div"]))
def test_broadcast_binary_grads(pair, op):
    rng = np.random.default_rng(0)
    a = rng.normal(size=pair[0])
    b = rng.uniform(0.5, 2.0, size=pair[1])
    check_grad(getattr(T, op), a, b)


@pytest.mark.parametrize("fn", [T.exp, T.tanh, T.sigmoid, T.square, T.silu, T.neg,
                                lambda x: T.log(T.exp(x) + 1.0), lambda x: T.relu(x + 0.05)])
def test_unary_grads(fn):
    x = np.random.default_rng(1).normal(size=(3, 4))
    x[np.abs(x + 0.05) < 1e-3] += 0.1
    check_grad(fn, x)


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_matmul_batched_grads():
    rng = np.random.default_rng(2)
    check_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    check_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["ij,jk->ik", "bij,bjk->bik", "bnth,bnsh->bnts", "bnts,bnsh->bnth",
                        "bnclh,bnclj->bnchj", "ij,j->i", "ik,jk->ij", "i,j->ij", "ijk->ki"]),
       st.integers(0, 10_000))
def test_einsum_matches_numpy(spec, seed):
    rng = np.random.default_rng(seed)
    size = {c: int(rng.integers(1, 4)) for c in "ijkbnthscl"}
    ins = spec.split("->")[0].split(",")
    arrays = [rng.normal(size=[size[c] for c in s]) for s in ins]
    got = T.einsum(spec, *[Tensor(a) for a in arrays]).data
    np.testing.assert_allclose(got, np.einsum(spec, *arrays), atol=1e-12)


def test_einsum_grads():
    rng = np.random.default_rng(3)
    check_grad(lambda a, b: T.einsum("bnth,bnsh->bnts", a, b), rng.normal(size=(1, 2, 3, 4)),
               rng.normal(size=(1, 2, 5, 4)))
    check_grad(lambda a: T.einsum("ijk->kj", a), rng.normal(size=(2, 3, 4)))


def test_einsum_rejects_implicit_output():
    with pytest.raises(ContractError):
        T.einsum("ij,jk", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))


def test_reduction_and_shape_grads():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    check_grad(lambda a: T.sum(a, axis=1), x)
    check_grad(lambda a: T.mean(a, axis=(0, 2), keepdims=True), x)
    check_grad(lambda a: T.reshape(a, (6, 4)), x)
    check_grad(lambda a: T.transpose(a, (2, 0, 1)), x)
    check_grad(lambda a: a[:, 1:, ::2], x)
    check_grad(lambda a: a[np.array([0, 0, 1])], x)  # repeated index accumulates
    check_grad(lambda a, b: T.concat([a, b], axis=1), x, rng.normal(size=(2, 2, 4)))
    check_grad(lambda a: T.cumsum(a, axis=1), x)
    mask = rng.random((3, 4)) < 0.3
    check_grad(lambda a: T.masked_fill(a, mask, 0.0), x)


def test_fused_norm_softmax_grads():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    check_grad(lambda a: T.softmax(a, axis=-1), x)
    check_grad(lambda a, gg, bb: T.layernorm(a, gg, bb), x, g, b)
    check_grad(lambda a, gg: T.rmsnorm(a, gg), x, g)


def test_softmax_masked_rows_and_normalisation():
    x = Tensor(np.array([[0.0, -np.inf, 1.0], [1e4, 1e4, -1e4]]))
    p = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)
    assert p[0, 1] == 0.0
    assert np.isfinite(p).all()


def test_layernorm_statistics():
    x = np.random.default_rng(6).normal(3.0, 5.0, size=(4, 64))
    y = T.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-5)


def test_cross_entropy_value_grad_and_normalizer():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(5, 7))
    t = rng.integers(0, 7, size=5)
    loss = T.cross_entropy(Tensor(z), t).data
    ref = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(5), t])
    np.testing.assert_allclose(loss, ref)
    np.testing.assert_allclose(T.cross_entropy(Tensor(z), t, normalizer=10).data, ref * 5 / 10)
    check_grad(lambda a: T.cross_entropy(a, t) * 1.0, z)


def test_embedding_grad_and_range():
    rng = np.random.default_rng(8)
    W = rng.normal(size=(6, 3))
    ids = np.array([[1, 4, 1]])
    check_grad(lambda w: T.embedding(w, ids), W)
    with pytest.raises(ContractError):
        T.embedding(Tensor(W), np.array([6]))


def test_flop_counter_counts_matmul_macs_by_tag():
    a, b = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5)))
    with T.flop_counter() as fc:
        a @ b
        with T.flop_tag("head"):
            T.einsum("bij,jk->bik", a, b)
    assert fc.by_tag["other"] == 2 * 3 * 4 * 5
    assert fc.by_tag["head"] == 2 * 3 * 4 * 5
    assert fc.total == 2 * 120


def test_activation_meter_tracks_live_and_peak():
    with T.activation_meter() as meter:
        a = Tensor(np.zeros(1000))
        b = Tensor(np.zeros(500))
        del a
    assert meter.peak == 12000
    assert meter.live == 4000
    del b
