"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The engine is deliberately small: a fixed set of operations, each with its own
hand-written gradient rule, recorded in execution order on a :class:`Tape`.
``backward`` replays the tape in exact reverse order and accumulates gradients
additively into every ``requires_grad`` leaf.  There is no general
broadcasting; binary elementwise ops accept same-shape tensors or a Python
scalar, and the few broadcast patterns the models need (bias rows, per-vector
weights) are dedicated ops so their gradient rules stay individually testable.

64-bit floats are the default so finite-difference checks stay meaningful;
``set_default_dtype(np.float32)`` switches new tensors to 32-bit.

Checked mode (on by default) traps NaN/Inf outputs and domain violations at
the op that produced them; wrap timed loops in ``unchecked()`` to skip the
scans.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DEFAULT_DTYPE = np.float64

_CHECKED = True
_TAPES: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    DEFAULT_DTYPE = dtype


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def unchecked():
    """Temporarily disable NaN/Inf trapping (used by timed training loops)."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = False
    try:
        yield
    finally:
        _CHECKED = prev


class Tape:
    """Execution-ordered record of differentiable operations.

    Appending in execution order guarantees every op's inputs precede it, so
    ``backward`` can walk ``ops`` in exact reverse recording order.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False


class _Op:
    __slots__ = ("inputs", "out", "grad_fn")

    def __init__(self, inputs, out, grad_fn):
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn


class Tensor:
    """A dense n-dimensional array of real scalars, optionally grad-tracked.

    ``data`` is never mutated by any op; the optimizer replaces it wholesale.
    ``grad`` accumulates across ``backward`` calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def constant(data, dtype=None) -> Tensor:
    """A non-differentiable tensor (targets, masks, fixed encodings)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite value in output")


def _make(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(name, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.tape = None
    if out.requires_grad and _TAPES:
        tape = _TAPES[-1]
        tape.ops.append(_Op(tuple(inputs), out, grad_fn))
        out.tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Repeated calls accumulate again; zero grads between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.tape is None:
        raise ContractError("loss is not attached to a tape (build it inside `with Tape():`)")
    flowing: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for op in reversed(loss.tape.ops):
        entry = flowing.pop(id(op.out), None)
        if entry is None:
            continue
        grads = op.grad_fn(entry[1])
        for t, g in zip(op.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            held = flowing.get(id(t))
            if held is None:
                flowing[id(t)] = [t, np.array(g, copy=True)]
            else:
                held[1] = held[1] + g
    for t, g in flowing.values():
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_prep(name: str, a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} "
                         "(same-shape or scalar-with-tensor only)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only the scalar-with-tensor case ever broadcasts
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_prep("add", a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _binary_prep("mul", a, b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _binary_prep("div", a, b)
    if _CHECKED and np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED and np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make("relu", out, (a,), lambda g: (g * (a.data > 0.0),))


def powc(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    if _CHECKED:
        if p != round(p) and np.any(a.data < 0.0):
            raise DomainError("powc: negative base with non-integer exponent")
        if p < 0 and np.any(a.data == 0.0):
            raise DomainError("powc: zero base with negative exponent")
    out = a.data ** p
    return _make("powc", out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient flows only strictly inside."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make("clip", out, (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _binary_prep("maximum", a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make("maximum", out, (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _binary_prep("minimum", a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make("minimum", out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), grad_fn)


def bmm(a, b) -> Tensor:
    """Batched matmul: [B,M,K] @ [B,K,N] -> [B,M,N]."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _make("bmm", out, (a, b), grad_fn)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need ndim >= 2, got shape {a.shape}")
    out = a.data.swapaxes(-1, -2)
    return _make("transpose", np.ascontiguousarray(out), (a,),
                 lambda g: (g.swapaxes(-1, -2),))


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def expand(a, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums over the broadcast axes."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from err

    def grad_fn(g):
        extra = len(shape) - a.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i in range(a.ndim) if a.shape[i] == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(a.shape),)

    return _make("expand", out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, grad_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _make("slice_axis", out, (a,), grad_fn)


def gather_rows(a, idx) -> Tensor:
    """Row lookup a[idx] for an integer index vector (embedding-style)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= a.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = np.ascontiguousarray(a.data[idx])

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("gather_rows", out, (a,), grad_fn)


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: shapes {a.shape} and {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise ContractError(f"take_per_row: column index out of range for {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx].copy()

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make("take_per_row", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())
    return _make("sum_all", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum_axis", out, (a,), grad_fn)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# broadcast helpers with dedicated gradient rules


def add_row(a, b) -> Tensor:
    """Add a vector b along the last axis of a (bias add)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_row: shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def grad_fn(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, gb

    return _make("add_row", out, (a, b), grad_fn)


def mul_last(a, w) -> Tensor:
    """Scale each last-axis vector of a by the matching scalar in w."""
    a = _as_tensor(a)
    w = _as_tensor(w)
    if w.shape != a.shape[:-1]:
        raise ShapeError(f"mul_last: shapes {a.shape} and {w.shape}")
    out = a.data * w.data[..., None]

    def grad_fn(g):
        return g * w.data[..., None], (g * a.data).sum(axis=-1)

    return _make("mul_last", out, (a, w), grad_fn)


# ---------------------------------------------------------------------------
# softmax family and normalization


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), grad_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis, then scale and shift."""
    a = _as_tensor(a)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} vs gain {gain.shape}, bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gxhat = g * gain.data
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        ga = ivar * (gxhat - m1 - xhat * m2)
        return ga, ggain, gbias

    return _make("layer_norm", out, (a, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# temporal sampling and pooling


def linear_sample(values, pos) -> Tensor:
    """Sample a [T, D] feature map at normalized positions.

    Positions map to the continuous coordinate ``u = pos * (T - 1)``; values
    are linearly interpolated between the two neighbouring rows.  Coordinates
    outside [0, T-1] (i.e. pos outside [0, 1]) produce zeros, and their
    position gradient is zero.  Output shape is ``pos.shape + (D,)``.
    """
    values = _as_tensor(values)
    pos = _as_tensor(pos)
    if values.ndim != 2:
        raise ShapeError(f"linear_sample: values must be [T, D], got {values.shape}")
    t, d = values.shape
    u = pos.data * (t - 1)
    inside = (u >= 0.0) & (u <= t - 1)
    uc = np.clip(u, 0.0, t - 1)
    lo = np.minimum(np.floor(uc), max(t - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    w = uc - lo
    v_lo = values.data[lo]
    v_hi = values.data[hi]
    out = ((1.0 - w)[..., None] * v_lo + w[..., None] * v_hi) * inside[..., None]

    def grad_fn(g):
        gm = g * inside[..., None]
        gv = np.zeros_like(values.data)
        np.add.at(gv, lo, (1.0 - w)[..., None] * gm)
        np.add.at(gv, hi, w[..., None] * gm)
        gpos = ((v_hi - v_lo) * gm).sum(axis=-1) * (t - 1)
        return gv, gpos

    return _make("linear_sample", out, (values, pos), grad_fn)


def linear_sample_per_head(values, pos) -> Tensor:
    """Per-head variant: values [T, H, Dh], pos [N, H, K] -> [N, H, K, Dh]."""
    values = _as_tensor(values)
    pos = _as_tensor(pos)
    if values.ndim != 3 or pos.ndim != 3 or values.shape[1] != pos.shape[1]:
        raise ShapeError(f"linear_sample_per_head: shapes {values.shape} and {pos.shape}")
    t, h, dh = values.shape
    u = pos.data * (t - 1)
    inside = (u >= 0.0) & (u <= t - 1)
    uc = np.clip(u, 0.0, t - 1)
    lo = np.minimum(np.floor(uc), max(t - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    w = uc - lo
    heads = np.arange(h)[None, :, None]
    v_lo = values.data[lo, heads]
    v_hi = values.data[hi, heads]
    out = ((1.0 - w)[..., None] * v_lo + w[..., None] * v_hi) * inside[..., None]

    def grad_fn(g):
        gm = g * inside[..., None]
        gv = np.zeros_like(values.data)
        hb = np.broadcast_to(heads, lo.shape)
        np.add.at(gv, (lo, hb), (1.0 - w)[..., None] * gm)
        np.add.at(gv, (hi, hb), w[..., None] * gm)
        gpos = ((v_hi - v_lo) * gm).sum(axis=-1) * (t - 1)
        return gv, gpos

    return _make("linear_sample_per_head", out, (values, pos), grad_fn)


def avgpool2_rows(a) -> Tensor:
    """Average adjacent row pairs of a [T, D] map; odd tails pool alone."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"avgpool2_rows: need [T, D], got {a.shape}")
    t, d = a.shape
    t_out = (t + 1) // 2
    even = a.data[0:2 * (t // 2):2]
    odd = a.data[1:2 * (t // 2):2]
    if t % 2 == 0:
        out = (even + odd) / 2.0
    else:
        out = np.concatenate([(even + odd) / 2.0, a.data[-1:]], axis=0)

    def grad_fn(g):
        ga = np.empty_like(a.data)
        if t % 2 == 0:
            ga[0::2] = g / 2.0
            ga[1::2] = g / 2.0
        else:
            ga[0:-1:2] = g[:-1] / 2.0
            ga[1::2] = g[:-1] / 2.0
            ga[-1] = g[-1]
        return (ga,)

    return _make("avgpool2_rows", out, (a,), grad_fn)
