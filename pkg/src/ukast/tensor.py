"""Minimal dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array. Differentiable
operations record nodes onto the innermost active ``Tape``; ``backward``
walks the tape once in reverse recording order and accumulates gradients
additively into every ``requires_grad`` tensor reachable from the loss.

Training runs in float32; gradient checks build float64 graphs. No views
survive an op: every operation materializes a fresh contiguous result.
"""

from __future__ import annotations

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


# ----------------------------------------------------------------------
# tape


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; a context manager.

    Nodes are appended in execution order, so every node's inputs were
    recorded earlier; backward visits them exactly once, reversed.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ----------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = TapeNode(tuple(inputs), out, backward_fn)
    out.tape_node = node
    tape.nodes.append(node)
    return out


def apply_op(inputs, out_data, backward_fn):
    """Record a custom differentiable op.

    backward_fn(grad_out) must return one gradient array (or None) per
    input, already reduced to each input's shape.
    """
    out = Tensor(out_data)
    return _record(out, inputs, backward_fn)


def backward(loss):
    """Reverse sweep from a scalar loss over the active tape."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    loss.accumulate_grad(np.ones((), dtype=loss.data.dtype))
    for node in reversed(tape.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                if not g.flags["C_CONTIGUOUS"]:
                    g = np.ascontiguousarray(g)
                inp.accumulate_grad(g)


# ----------------------------------------------------------------------
# broadcasting helpers


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"shapes {tuple(a.shape)} and {tuple(b.shape)} are not broadcastable"
        ) from None


def unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise ops


def add(x, y):
    x, y = as_tensor(x, y if isinstance(y, Tensor) else None), as_tensor(y, x if isinstance(x, Tensor) else None)
    _broadcast_check(x.data, y.data)
    out = Tensor(x.data + y.data)
    return _record(
        out,
        (x, y),
        lambda g: (unbroadcast(g, x.data.shape), unbroadcast(g, y.data.shape)),
    )


def sub(x, y):
    x, y = as_tensor(x, y if isinstance(y, Tensor) else None), as_tensor(y, x if isinstance(x, Tensor) else None)
    _broadcast_check(x.data, y.data)
    out = Tensor(x.data - y.data)
    return _record(
        out,
        (x, y),
        lambda g: (unbroadcast(g, x.data.shape), unbroadcast(-g, y.data.shape)),
    )


def mul(x, y):
    x, y = as_tensor(x, y if isinstance(y, Tensor) else None), as_tensor(y, x if isinstance(x, Tensor) else None)
    _broadcast_check(x.data, y.data)
    out = Tensor(x.data * y.data)
    return _record(
        out,
        (x, y),
        lambda g: (
            unbroadcast(g * y.data, x.data.shape),
            unbroadcast(g * x.data, y.data.shape),
        ),
    )


def div(x, y):
    x, y = as_tensor(x, y if isinstance(y, Tensor) else None), as_tensor(y, x if isinstance(x, Tensor) else None)
    _broadcast_check(x.data, y.data)
    out = Tensor(x.data / y.data)
    return _record(
        out,
        (x, y),
        lambda g: (
            unbroadcast(g / y.data, x.data.shape),
            unbroadcast(-g * x.data / (y.data * y.data), y.data.shape),
        ),
    )


def neg(x):
    out = Tensor(-x.data)
    return _record(out, (x,), lambda g: (-g,))


def absolute(x):
    # sign(0) = 0: no gradient flows through the kink
    out = Tensor(np.abs(x.data))
    return _record(out, (x,), lambda g: (g * np.sign(x.data),))


def exp(x):
    e = np.exp(x.data)
    out = Tensor(e)
    return _record(out, (x,), lambda g: (g * e,))


def log(x):
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def sqrt(x):
    r = np.sqrt(x.data)
    out = Tensor(r)
    return _record(out, (x,), lambda g: (g * (0.5 / r),))


def tanh(x):
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    """tanh-approximation GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(u)
    out = Tensor(0.5 * v * (1.0 + t))

    def bwd(g):
        du = _GELU_C * (1.0 + 0.134145 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _record(out, (x,), bwd)


_UNARY = {
    "neg": neg,
    "abs": absolute,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, x, y=None):
    """Dispatch by name; binary kinds broadcast by the trailing-dim rule."""
    if op_kind in _BINARY:
        if y is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](x, y)
    if op_kind in _UNARY:
        if y is not None:
            raise TypeError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](x)
    raise ValueError(f"unknown elementwise kind {op_kind!r}")


# ----------------------------------------------------------------------
# matmul


def matmul(x, y):
    if x.data.ndim < 2 or y.data.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if x.data.shape[-1] != y.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {tuple(x.data.shape)} @ {tuple(y.data.shape)}"
        )
    out = Tensor(np.matmul(x.data, y.data))

    def bwd(g):
        gx = np.matmul(g, np.swapaxes(y.data, -1, -2))
        gy = np.matmul(np.swapaxes(x.data, -1, -2), g)
        return unbroadcast(gx, x.data.shape), unbroadcast(gy, y.data.shape)

    return _record(out, (x, y), bwd)


# ----------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim if -ndim <= a < ndim else a for a in axes)
    for a in axes:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
    return tuple(sorted(set(axes)))


def _expand_reduced(g, shape, axes):
    keep = list(shape)
    for a in axes:
        keep[a] = 1
    return np.broadcast_to(g.reshape(keep), shape)


def reduce_sum(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.data.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        gg = g if keepdims else g.reshape(
            tuple(1 if a in axes else d for a, d in enumerate(x.data.shape))
        )
        return (np.broadcast_to(gg, x.data.shape).astype(x.data.dtype, copy=True),)

    return _record(out, (x,), bwd)


def reduce_mean(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        gg = g if keepdims else g.reshape(
            tuple(1 if a in axes else d for a, d in enumerate(x.data.shape))
        )
        return ((np.broadcast_to(gg, x.data.shape) / n).astype(x.data.dtype, copy=False),)

    return _record(out, (x,), bwd)


def reduce_max(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.data.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    out = Tensor(m if keepdims else m.reshape(
        tuple(d for a, d in enumerate(x.data.shape) if a not in axes)
    ))

    def bwd(g):
        gg = g if keepdims else g.reshape(
            tuple(1 if a in axes else d for a, d in enumerate(x.data.shape))
        )
        mask = x.data == m
        counts = mask.sum(axis=axes, keepdims=True)
        return ((mask * (gg / counts)).astype(x.data.dtype, copy=False),)

    return _record(out, (x,), bwd)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op_kind, x, axes=None, keepdims=False):
    if op_kind not in _REDUCERS:
        raise ValueError(f"unknown reduce kind {op_kind!r}")
    return _REDUCERS[op_kind](x, axes, keepdims)


# ----------------------------------------------------------------------
# softmax family and normalization


def softmax(x, axis=-1):
    axis = _norm_axes(axis, x.data.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bwd)


def log_softmax(x, axis=-1):
    axis = _norm_axes(axis, x.data.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    z = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(z)

    def bwd(g):
        return (g - np.exp(z) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def normalize_affine(x, gamma, beta, axes, eps):
    """(x - mean) / sqrt(var + eps) * gamma + beta over the given axes.

    Shared core of layer/instance/batch normalization; gamma and beta
    must broadcast against x.
    """
    axes = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.data.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        dgamma = unbroadcast(g * xhat, gamma.data.shape)
        dbeta = unbroadcast(g, beta.data.shape)
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
        return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd)


def layer_norm(x, gamma, beta, axis=-1, eps=1e-5):
    axis = _norm_axes(axis, x.data.ndim)[0]
    if gamma.data.shape != (x.data.shape[axis],) or beta.data.shape != gamma.data.shape:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match axis length {x.data.shape[axis]}"
        )
    if axis != x.data.ndim - 1:
        shape = [1] * x.data.ndim
        shape[axis] = x.data.shape[axis]
        gamma = reshape(gamma, *shape)
        beta = reshape(beta, *shape)
    return normalize_affine(x, gamma, beta, (axis,), eps)


# ----------------------------------------------------------------------
# movement ops


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=0):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _record(out, tuple(tensors), bwd)


def getitem(x, key):
    out = Tensor(np.ascontiguousarray(x.data[key]))

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[key] += g
        return (buf,)

    return _record(out, (x,), bwd)


def pad(x, pad_width):
    """Zero padding; pad_width as in np.pad."""
    out = Tensor(np.pad(x.data, pad_width))
    slicer = tuple(
        slice(before, before + dim) for (before, _), dim in zip(pad_width, x.data.shape)
    )
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g[slicer]),))


def roll(x, shifts, axes):
    out = Tensor(np.roll(x.data, shifts, axis=axes))
    inv = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts
    return _record(out, (x,), lambda g: (np.roll(g, inv, axis=axes),))


def gather(x, indices, axis=0):
    """Select rows (np.take) with scatter-add backward."""
    idx = np.asarray(indices)
    out = Tensor(np.take(x.data, idx, axis=axis))

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (slice(None),) * axis + (idx,), g)
        return (buf,)

    return _record(out, (x,), bwd)


# ----------------------------------------------------------------------
# convolutions (im2col / BLAS path; shared by both kernel backends)


def conv2d(x, w, b=None, padding=0):
    """NCHW convolution, stride 1. w: [Cout, Cin, kh, kw]."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    kh, kw = w.data.shape[2], w.data.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out_data = np.einsum("ncijuv,ocuv->noij", win, w.data, optimize=True)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        dw = np.einsum("ncijuv,noij->ocuv", win, g, optimize=True)
        gp = np.pad(
            g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2)
        )
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wflip = w.data[:, :, ::-1, ::-1]
        dx = np.einsum("noijuv,ocuv->ncij", gwin, wflip, optimize=True)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        grads = (dx.astype(x.data.dtype, copy=False), dw.astype(w.data.dtype, copy=False))
        return grads + ((db,) if b is not None else ())

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def conv_transpose2d(x, w, b=None, stride=2):
    """Non-overlapping transposed conv: kernel size == stride. w: [Cin, Cout, s, s]."""
    s = stride
    if w.data.shape[2] != s or w.data.shape[3] != s:
        raise ShapeError("conv_transpose2d requires kernel size == stride")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    n, c, h, wid = x.data.shape
    co = w.data.shape[1]
    y = np.einsum("ncij,couv->noiujv", x.data, w.data, optimize=True)
    out_data = y.reshape(n, co, h * s, wid * s)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(g):
        gr = g.reshape(n, co, h, s, wid, s)
        dx = np.einsum("noiujv,couv->ncij", gr, w.data, optimize=True)
        dw = np.einsum("ncij,noiujv->couv", x.data, gr, optimize=True)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        grads = (dx.astype(x.data.dtype, copy=False), dw.astype(w.data.dtype, copy=False))
        return grads + ((db,) if b is not None else ())

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


# ----------------------------------------------------------------------
# grouped safe rational activation (kernel-backed)


def rational_op(x, a, b):
    """Grouped P/(1+|Q|) over the last axis; a: [g, m+1], b: [g, n].

    Channel c uses the coefficients of group c * g // channels. Inputs
    must be finite; the offending flat index is reported otherwise.
    """
    channels = x.data.shape[-1]
    groups = a.data.shape[0]
    if channels % groups:
        raise ShapeError(f"group count {groups} does not divide channels {channels}")
    if not np.isfinite(x.data).all():
        bad = int(np.flatnonzero(~np.isfinite(x.data.reshape(-1)))[0])
        raise FloatingPointError(f"non-finite input to rational activation at flat index {bad}")
    flat = x.data.reshape(-1, channels)
    out = Tensor(kernels.pau_forward(flat, a.data, b.data).reshape(x.data.shape))

    def bwd(g):
        dx, da, db = kernels.pau_backward(flat, a.data, b.data, g.reshape(-1, channels))
        return dx.reshape(x.data.shape), da, db

    return _record(out, (x, a, b), bwd)
