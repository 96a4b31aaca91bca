"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Dynamic (define-by-run) tape over float32 numpy storage, with an optional
float64 mode for tight gradient checks. A tape and the tensors recorded on it
belong to one thread; the active tape stack is thread-local so immutable
parameter snapshots can serve concurrent inference.

Gradients accumulate into ``Tensor.grad`` until zeroed; calling ``backward``
twice without zeroing adds the contributions.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "tape",
    "no_grad",
    "use_dtype",
    "default_dtype",
    "set_default_dtype",
    "tensor",
    "zeros",
    "adamw_init",
    "adamw_step",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeMismatchError(ValueError):
    """Structured shape error naming the offending shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


_state = threading.local()


def _tapes():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


_DTYPE = {"value": np.float32}


def default_dtype():
    return _DTYPE["value"]


def set_default_dtype(dt):
    _DTYPE["value"] = np.dtype(dt).type


@contextmanager
def use_dtype(dt):
    old = _DTYPE["value"]
    set_default_dtype(dt)
    try:
        yield
    finally:
        _DTYPE["value"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Tape:
    """Records operations in execution order; reverse order is topological."""

    def __init__(self):
        self._nodes = []
        self._grads = {}

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def record(self, out: Tensor, parents, backward_fn):
        self._nodes.append((out, tuple(parents), backward_fn))

    def backward(self, loss: Tensor):
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeMismatchError("backward", loss.shape, "scalar")
        recorded = {id(out) for out, _, _ in self._nodes}
        if id(loss) not in recorded:
            raise ValueError("backward through a tensor not recorded on this tape")
        grads = self._grads
        grads.clear()
        grads[id(loss)] = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None:
                    continue
                if parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                elif key in recorded:
                    grads[key] = pg
                elif parent.requires_grad:
                    pass  # leaf: already accumulated above
        grads.clear()


def active_tape():
    tapes = _tapes()
    return tapes[-1] if tapes else None


@contextmanager
def tape():
    with Tape() as t:
        yield t


@contextmanager
def no_grad():
    _tapes().append(None)
    try:
        yield
    finally:
        _tapes().pop()


def backward(loss: Tensor):
    t = active_tape()
    if t is None:
        raise ValueError("backward requires an active tape")
    t.backward(loss)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _record(out, parents, backward_fn):
    t = active_tape()
    if t is not None:
        t.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise ShapeMismatchError("div", a.shape, b.shape)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = _wrap(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def _unary(a, fw, bw):
    a = _wrap(a)
    out = Tensor(fw(a.data))
    return _record(out, (a,), lambda g: (bw(g, a.data, out.data),))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0))


def absolute(a):
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1 - y * y))


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a):
    # Guarded derivative keeps gradients finite at exactly zero inputs.
    def bw(g, x, y):
        return g / (2.0 * np.maximum(y, np.finfo(y.dtype).tiny ** 0.5))

    return _unary(a, np.sqrt, bw)


def sin(a):
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, y: -g * np.sin(x))


def square(a):
    return _unary(a, np.square, lambda g, x, y: 2.0 * g * x)


# ---------------------------------------------------------------------------
# contractions and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = Tensor(a.data @ b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def einsum(spec: str, a, b):
    """Two-operand einsum; every input index must appear in the other operand
    or the output (no internal traces), which holds for attention patterns."""
    a, b = _wrap(a), _wrap(b)
    ins, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    try:
        out = Tensor(np.einsum(spec, a.data, b.data))
    except ValueError:
        raise ShapeMismatchError(f"einsum[{spec}]", a.shape, b.shape)

    def bw(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
        return ga, gb

    return _record(out, (a, b), bw)


def transpose(a, axes=None):
    a = _wrap(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_axes(a, ax1, ax2):
    a = _wrap(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise ShapeMismatchError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _record(out, tensors, bw)


def index(a, idx):
    """Basic slicing / integer-array indexing."""
    a = _wrap(a)
    out = Tensor(a.data[idx])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), bw)


def embedding_lookup(table, indices):
    """Row gather on axis 0 with scatter-add backward."""
    table = _wrap(table)
    indices = np.asarray(indices)
    out = Tensor(table.data[indices])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _record(out, (table,), bw)


def take_along(a, indices, axis):
    """Gather along an axis (np.take_along_axis semantics)."""
    a = _wrap(a)
    indices = np.asarray(indices)
    out = Tensor(np.take_along_axis(a.data, indices, axis=axis))

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, indices, g, axis=axis)  # indices unique along axis
        return (ga,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def _extreme(a, axis, keepdims, fn, argfn):
    a = _wrap(a)
    out = Tensor(fn(a.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            ga = np.zeros_like(a.data)
            flat_idx = argfn(a.data)
            ga.flat[flat_idx] = g
            return (ga,)
        idx = np.expand_dims(argfn(a.data, axis=axis), axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, gg, axis=axis)
        return (ga,)

    return _record(out, (a,), bw)


def reduce_max(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, np.max, np.argmax)


def reduce_min(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, np.min, np.argmin)


def maximum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.maximum(a.data, b.data))
    mask = a.data >= b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
    )


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.minimum(a.data, b.data))
    mask = a.data <= b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
    )


def where(cond, a, b):
    """cond is a constant boolean array; gradients flow through the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.where(cond, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def masked_fill(a, mask, value):
    """Fill positions where ``mask`` is True with a constant; no gradient there."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data))
    return _record(out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# neural-net compound ops
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)

    def bw(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bw)


def layer_norm(a, gain, bias, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = a.shape[-1]

    def bw(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx.astype(a.data.dtype), ggain, gbias

    return _record(out, (a, gain, bias), bw)


def smooth_l1(pred, target, threshold: float = 1.0):
    """Elementwise smooth-L1: 0.5 d^2 / c inside |d| < c, |d| - 0.5 c outside."""
    pred, target = _wrap(pred), _wrap(target)
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < threshold
    out = Tensor(np.where(quad, 0.5 * d * d / threshold, ad - 0.5 * threshold))

    def bw(g):
        gd = g * np.where(quad, d / threshold, np.sign(d))
        return _unbroadcast(gd, pred.shape), _unbroadcast(-gd, target.shape)

    return _record(out, (pred, target), bw)


def cumsum(a, axis):
    a = _wrap(a)
    out = Tensor(np.cumsum(a.data, axis=axis))

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(out, (a,), bw)


def speed_scan(v0, accel_dt):
    """Unicycle speed recurrence v_{t+1} = |v_t| + a_t*dt as one fused op.

    v0 (...,), accel_dt (..., T) already scaled by dt -> speeds (..., T) for
    t = 1..T. The absolute value mirrors the forward model reading speed back
    through sqrt(vx^2 + vy^2).
    """
    v0, accel_dt = _wrap(v0), _wrap(accel_dt)
    T = accel_dt.shape[-1]
    out_data = np.empty_like(accel_dt.data)
    signs = np.empty_like(accel_dt.data)
    v = v0.data
    for t in range(T):
        s = np.sign(v)
        signs[..., t] = s
        v = np.abs(v) + accel_dt.data[..., t]
        out_data[..., t] = v
    out = Tensor(out_data)

    def bw(g):
        ga = np.empty_like(g)
        carry = np.zeros_like(v0.data)
        for t in range(T - 1, -1, -1):
            tot = g[..., t] + carry
            ga[..., t] = tot
            carry = tot * signs[..., t]
        return carry, ga

    return _record(out, (v0, accel_dt), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_init(params: dict) -> dict:
    return {
        name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
        for name, p in params.items()
    }


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """Decoupled weight decay update; only parameters present in ``grads`` move."""
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        s = state[name]
        s["t"] += 1
        s["m"] = b1 * s["m"] + (1 - b1) * g
        s["v"] = b2 * s["v"] + (1 - b2) * g * g
        mhat = s["m"] / (1 - b1 ** s["t"])
        vhat = s["v"] / (1 - b2 ** s["t"])
        p.data -= (lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)).astype(
            p.data.dtype
        )


def clip_grad_norm(grads: dict, max_norm: float = 1.0) -> float:
    """Jointly rescale all gradients when the global norm exceeds ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint io: one-line UTF-8 JSON manifest, then little-endian f32 payloads
# in manifest order
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    names = list(tensors.keys())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "tensors": [
            {"name": n, "dtype": "f32", "shape": list(np.asarray(_data(tensors[n])).shape)}
            for n in names
        ],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        for n in names:
            arr = np.ascontiguousarray(_data(tensors[n]), dtype="<f4")
            f.write(arr.tobytes())


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def load_checkpoint(path):
    with open(path, "rb") as f:
        header = f.readline()
        manifest = json.loads(header.decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"truncated checkpoint payload for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return tensors, manifest["meta"]
