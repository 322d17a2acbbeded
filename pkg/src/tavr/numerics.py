"""Dense tensors with tape-based reverse-mode autodiff on top of numpy.

Tensors wrap a numpy array. Operations record onto the active
:class:`GradTape` only when a tape is open and at least one input requires
gradients, so inference code pays nothing for autodiff.

Two precision modes exist: ``float32`` for training and ``float64`` for
gradient verification (see :func:`precision` and :func:`grad_check`).
"""
from __future__ import annotations

import contextlib
import threading
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "GradMap", "as_tensor", "precision", "default_dtype",
    "backward", "grad_check", "rng", "count_matmul_flops",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "sum", "mean",
    "reshape", "transpose", "concat", "take", "exp", "log", "square", "tanh",
    "sigmoid", "silu", "gelu", "softplus", "softmax_rows", "layer_norm",
    "attention_core", "cross_entropy",
]

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def count_matmul_flops():
    """Count multiply-add FLOPs (2 per MAC) of every matmul in the block.

    Yields a one-element list whose entry is updated in place.
    """
    prev = getattr(_local, "flops", None)
    box = [0]
    _local.flops = box
    try:
        yield box
    finally:
        _local.flops = prev


def rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream, index)``.

    Draws for different keys are independent of call order, so parallel
    consumers cannot perturb each other.
    """
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be nonnegative")
    key = (int(seed) % (1 << 64)) << 64 | zlib.crc32(stream.encode()) << 32 | (int(index) % (1 << 32))
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """An immutable n-d array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = np.asarray(arr, order="C")
        if not np.isfinite(self.data).all():
            raise FloatingPointError("tensor contains non-finite values")
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, key): return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradMap:
    """Gradients keyed by tensor identity; unknown tensors map to zeros."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def leaves(self) -> list:
        return list(self._tensors.values())


class GradTape:
    """Records primitive applications in execution order.

    Execution order is a topological order of the graph, so the reverse
    pass simply walks the record backwards.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()
        self._leaves.clear()
        self._consumed = False

    def watch(self, *tensors: Tensor):
        """Register grad-enabled leaves so they get (possibly zero) gradients."""
        for t in tensors:
            if t.requires_grad and t._tape is None:
                self._leaves[id(t)] = t

    def _record(self, out: Tensor, inputs: tuple, backward):
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._leaves[id(t)] = t
        out._tape = self
        self._nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> GradMap:
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ValueError("loss must be a scalar tensor")
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None) if node.out is not loss else grads.get(id(loss))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        leaf_grads = {k: grads[k] for k in self._leaves if k in grads}
        return GradMap(leaf_grads, dict(self._leaves))


def backward(loss: Tensor) -> GradMap:
    """Run the reverse pass of the tape that produced ``loss``."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.isfinite(data).all():
        raise FloatingPointError("operation produced non-finite values")
    out.data = data
    out._tape = None
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1]._record(out, inputs, backward)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)
    return _make(out, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.asarray(a.data.transpose(axes), order="C"), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)
    return _make(np.take(a.data, index, axis=axis), (a,), bw)


def _getitem(a: Tensor, key) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)
    return _make(np.asarray(a.data[key], order="C"), (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    box = getattr(_local, "flops", None)
    if box is not None:
        box[0] += 2 * out.size * ad.shape[-1]

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))
    return _make(out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for x of shape (..., k), w (k, n), b (n,)."""
    x = as_tensor(x)
    y = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w)
    if x.ndim < 2:
        y = reshape(y, (-1,))
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- fused kernels

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(x, scale=None, shift=None, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply optional affine ``scale``/``shift``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    inputs = [x]
    out = xhat
    sd = None
    if scale is not None:
        scale = as_tensor(scale, xd.dtype)
        sd = scale.data
        out = out * sd
        inputs.append(scale)
    if shift is not None:
        shift = as_tensor(shift, xd.dtype)
        out = out + shift.data
        inputs.append(shift)
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx_hat = g * sd if sd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if scale is not None:
            res.append((g * xhat).sum(axis=lead))
        if shift is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)
    return _make(out, tuple(inputs), bw)


def attention_core(q, k, v, head_count: int) -> Tensor:
    """Multi-head scaled dot-product attention on 2-d token matrices.

    q: (n_q, d), k and v: (n_k, d). Each head uses softmax(QK^T / sqrt(d/h)) V.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n_q, d = q.shape
    n_k = k.shape[0]
    if d % head_count:
        raise ValueError(f"width {d} not divisible by head_count {head_count}")
    dh = d // head_count
    qh = transpose(reshape(q, (n_q, head_count, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (n_k, head_count, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (n_k, head_count, dh)), (1, 0, 2))
    scores = mul(matmul(qh, kh), 1.0 / np.sqrt(dh))
    out = matmul(softmax_rows(scores), vh)
    return reshape(transpose(out, (1, 0, 2)), (n_q, d))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    p = softmax_rows(logits)
    rows = np.arange(logits.shape[0])
    picked = _getitem(p, (rows, labels))
    return neg(mean(log(picked)))


# ---------------------------------------------------------------- verification

def grad_check(f: Callable, x, step: float = 1e-6, points: int = 2) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors; ``f(x)`` must return a scalar
    Tensor. Requires float64 inputs. The relative error of each element is
    ``|a - b| / max(|a|, |b|, 1e-8)``. ``points=4`` uses the fourth-order
    central stencil, which tolerates a larger step and so keeps roundoff
    below the tiny gradients deep networks produce.
    """
    if points not in (2, 4):
        raise ValueError("points must be 2 or 4")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ValueError("grad_check runs only in 64-bit mode")
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with GradTape() as tape:
            tape.watch(*xs)
            loss = f(x)
        grads = tape.backward(loss)
        worst = 0.0
        for t in xs:
            analytic = grads[t].reshape(-1)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]

                def at(h):
                    flat[i] = orig + h
                    return float(f(x).data)
                if points == 2:
                    numeric = (at(step) - at(-step)) / (2.0 * step)
                else:
                    numeric = (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step)
                flat[i] = orig
                a = float(analytic[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl


def parameters_of(obj) -> Iterable[Tensor]:
    if isinstance(obj, Tensor):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from parameters_of(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from parameters_of(v)
