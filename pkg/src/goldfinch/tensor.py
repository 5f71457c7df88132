"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation executed while a :class:`Tape` is active and at
least one input requires gradients is appended to that tape.  ``Tape.backward``
replays the record in reverse order, which is a valid reverse topological order
because a record is only appended after all of its inputs exist.

Outside of a tape nothing is recorded, so inference code pays no bookkeeping
cost.  Storage is plain row-major numpy; slices always copy.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "is_recording",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "silu",
    "matmul",
    "einsum",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "cumsum",
    "masked_fill",
    "softmax",
    "layernorm",
    "rmsnorm",
    "embedding",
    "cross_entropy",
    "flop_counter",
    "flop_tag",
    "activation_meter",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


_local = threading.local()


def _tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


def is_recording() -> bool:
    return _active_tape() is not None


# --------------------------------------------------------------------------
# instrumentation


class _FlopCounter:
    def __init__(self) -> None:
        self.by_tag: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return int(builtins.sum(self.by_tag.values()))

    def add(self, macs: int) -> None:
        tags = getattr(_local, "flop_tags", None)
        self.by_tag[tags[-1] if tags else "other"] += int(macs)


class _ActivationMeter:
    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, n: int) -> None:
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def free(self, n: int) -> None:
        self.live -= n


def _count_macs(macs: int) -> None:
    counters = getattr(_local, "flop_counters", None)
    if counters:
        for c in counters:
            c.add(macs)


@contextlib.contextmanager
def flop_counter() -> Iterator[_FlopCounter]:
    """Count multiply-accumulates of matmul/einsum, bucketed by :func:`flop_tag`."""
    counter = _FlopCounter()
    stack = getattr(_local, "flop_counters", None)
    if stack is None:
        stack = _local.flop_counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


@contextlib.contextmanager
def flop_tag(tag: str) -> Iterator[None]:
    tags = getattr(_local, "flop_tags", None)
    if tags is None:
        tags = _local.flop_tags = []
    tags.append(tag)
    try:
        yield
    finally:
        tags.pop()


@contextlib.contextmanager
def activation_meter() -> Iterator[_ActivationMeter]:
    """Track live and peak bytes held by tensors created inside the block."""
    meter = _ActivationMeter()
    prev = getattr(_local, "meter", None)
    _local.meter = meter
    try:
        yield meter
    finally:
        _local.meter = prev


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf", "_meter", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._leaf = True
        meter = getattr(_local, "meter", None)
        if meter is not None:
            meter.alloc(self.data.nbytes)
            self._meter = meter
        else:
            self._meter = None

    def __del__(self):
        if self._meter is not None:
            self._meter.free(self.data.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype, copy=True)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _wrap(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _wrap(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _wrap(a, b.dtype), b
    return _wrap(a), _wrap(b)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; tapes nest, and only the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.adjoint_steps = 0

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - mis-nested use
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, vjp: Callable) -> None:
        output.requires_grad = True
        output._leaf = False
        self.nodes.append(_Node(op, inputs, output, vjp))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> int:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Returns the number of adjoint steps performed.  The tape is cleared
        afterwards; gradients accumulate across calls until zeroed.
        """
        if root.size != 1 and seed is None:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise ContractError("root does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.dtype)
        }
        leaves: dict[int, Tensor] = {}
        if root._leaf:
            leaves[id(root)] = root
        steps = 0
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            steps += 1
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.adjoint_steps = steps
        self.nodes.clear()
        return steps


def backward(root: Tensor, tape: Tape | None = None) -> int:
    """Backpropagate from a scalar ``root`` through ``tape`` (default: the active one)."""
    tape = tape or _active_tape()
    if tape is None:
        raise ContractError("no tape is active; run the forward pass inside `with Tape():`")
    return tape.backward(root)


def _make(op: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    t = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        tape.record(op, inputs, t, vjp)
    return t


# --------------------------------------------------------------------------
# elementwise


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split branches so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make("relu", out, (a,), lambda g: (g * (a.data > 0),))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make("silu", a.data * s, (a,), lambda g: (g * (s * (1 + a.data * (1 - s))),))


# --------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` is usually a 2-D weight, ``a`` may be a vector."""
    if b.ndim < 2 or a.ndim < 1 or (a.ndim == 1 and b.ndim != 2):
        raise DimensionError(f"matmul: unsupported operand ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot batch {a.shape} with {b.shape}") from None
    _count_macs(out.size * a.shape[-1])

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def _einsum_macs(spec: str, *shapes) -> int:
    ins, _ = spec.split("->")
    sizes: dict[str, int] = {}
    for sub_, shp in zip(ins.split(","), shapes):
        for ch, n in zip(sub_, shp):
            sizes[ch] = max(sizes.get(ch, 1), n)
    total = 1
    for n in sizes.values():
        total *= n
    return total


def _contract(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand contraction lowered to one batched ``np.matmul`` (BLAS)."""
    batch = [c for c in so if c in sa and c in sb]
    free_a = [c for c in sa if c in so and c not in sb]
    free_b = [c for c in sb if c in so and c not in sa]
    summed = [c for c in sa if c in sb and c not in so]
    size = {**dict(zip(sa, a.shape)), **dict(zip(sb, b.shape))}

    def prod(cs):
        return int(np.prod([size[c] for c in cs], dtype=np.int64))

    am = a.transpose([sa.index(c) for c in batch + free_a + summed])
    bm = b.transpose([sb.index(c) for c in batch + summed + free_b])
    am = am.reshape(prod(batch), prod(free_a), prod(summed))
    bm = bm.reshape(prod(batch), prod(summed), prod(free_b))
    out = np.matmul(am, bm).reshape([size[c] for c in batch + free_a + free_b])
    order = batch + free_a + free_b
    return np.ascontiguousarray(out.transpose([order.index(c) for c in so]))


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum over one or two operands (no repeated indices)."""
    spec = spec.replace(" ", "")
    if "->" not in spec:
        raise ContractError("einsum needs an explicit output ('->')")
    ins, out_sub = spec.split("->")
    subs = ins.split(",")
    if len(subs) != len(operands) or len(operands) not in (1, 2):
        raise ContractError(f"einsum: '{spec}' does not match {len(operands)} operand(s)")
    for s, t in zip(subs, operands):
        if len(s) != t.ndim:
            raise DimensionError(f"einsum: subscript '{s}' does not match shape {t.shape}")
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in '{s}'")
    sizes: dict[str, int] = {}
    for s, t in zip(subs, operands):
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(
                    f"einsum: index '{ch}' has extents {sizes[ch]} and {n} in '{spec}' "
                    f"(shapes {[o.shape for o in operands]})")
    if len(operands) == 1:
        (a,) = operands
        (sa,) = subs
        out = np.einsum(spec, a.data)

        def vjp1(g):
            # indices summed away are restored by broadcasting
            exp_shape = [sizes[ch] if ch in out_sub else 1 for ch in sa]
            src = "".join(ch for ch in sa if ch in out_sub)
            gg = np.einsum(f"{out_sub}->{src}", g).reshape(exp_shape)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return _make("einsum", out, (a,), vjp1)

    a, b = operands
    sa, sb = subs
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s:
            if ch not in out_sub and ch not in other:
                raise ContractError(f"einsum: index '{ch}' summed inside a single operand")
    out = _contract(sa, sb, out_sub, a.data, b.data)
    _count_macs(_einsum_macs(spec, a.shape, b.shape))

    def vjp(g):
        ga = _contract(out_sub, sb, sa, g, b.data) if a.requires_grad else None
        gb = _contract(out_sub, sa, sb, g, a.data) if b.requires_grad else None
        return ga, gb

    return _make("einsum", out, (a, b), vjp)


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make("transpose", out, (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = np.array(a.data[idx], copy=True)

    parts = idx if isinstance(idx, tuple) else (idx,)
    unique = builtins.all(
        p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer))
        or (isinstance(p, np.ndarray) and p.dtype == bool) for p in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make("cumsum", out, (a,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient flows there)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs tensor {a.shape}") from None
    return _make("masked_fill", out, (a,), lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape),))


# --------------------------------------------------------------------------
# fused numerically sensitive ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (two-pass mean/variance), then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gg = g * gamma.data if gamma is not None else g
        gx = rstd * (gg - gg.mean(axis=-1, keepdims=True)
                     - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma is not None and gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta is not None and beta.requires_grad else None
        return gx, ggamma, gbeta

    inputs = (x,) + tuple(t for t in (gamma, beta) if t is not None)

    def vjp_pack(g):
        gx, ggamma, gbeta = vjp(g)
        res = [gx]
        if gamma is not None:
            res.append(ggamma)
        if beta is not None:
            res.append(gbeta)
        return tuple(res)

    return _make("layernorm", out, inputs, vjp_pack)


def rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    xd = x.data
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(ms + eps)
    xhat = xd * rstd
    out = xhat * gain.data if gain is not None else xhat
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gg = g * gain.data if gain is not None else g
        gx = rstd * (gg - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        if gain is None:
            return (gx,)
        return gx, ((g * xhat).sum(axis=lead) if gain.requires_grad else None)

    return _make("rmsnorm", out, (x,) if gain is None else (x, gain), vjp)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def vjp(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding", out, (weight,), vjp)


def cross_entropy(logits: Tensor, targets, normalizer: float | None = None) -> Tensor:
    """Sum of token negative log-likelihoods divided by ``normalizer`` (default: row count)."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = float(len(targets) if normalizer is None else normalizer)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    nll = lse[:, 0] - z[rows, targets]
    out = np.asarray(nll.sum() / n, dtype=z.dtype)

    def vjp(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _make("cross_entropy", out, (logits,), vjp)
