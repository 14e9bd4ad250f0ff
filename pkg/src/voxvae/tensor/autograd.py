"""Reverse-mode differentiation over numpy arrays.

Each op records its parents and a closure mapping the output gradient to one
gradient per parent. ``backward`` walks the graph in reverse topological
order. Leaf gradients accumulate across calls until zeroed; intermediate
gradients are released as soon as they have been propagated.
"""
import numpy as np

from ..errors import GraphError, NumericError, ShapeError
from . import config, kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or config.default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A leaf tensor that always tracks gradients."""

    __slots__ = ()

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(b, dtype=a.dtype)
    elif b_t and not a_t:
        a = Tensor(a, dtype=b.dtype)
    elif not a_t and not b_t:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if config.grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root):
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            pm = state.get(id(p))
            if pm == 1:
                raise GraphError("cycle detected in computation graph")
            if pm is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward without an explicit gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    order = _topological_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = grad if loss.grad is None or loss._parents else loss.grad + grad
    for node in reversed(order):
        if not node._parents or node.grad is None:
            continue
        pgrads = node._backward(node.grad)
        for p, g in zip(node._parents, pgrads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g, dtype=p.dtype)
            p.grad = g.copy() if p.grad is None else p.grad + g
        node.grad = None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def square(a):
    a = as_tensor(a)

    def bw(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s.astype(a.dtype, copy=False), (a,), bw)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), bw)


def elu(a):
    """ELU with alpha = 1: x for x >= 0, exp(x) - 1 below."""
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, np.expm1(np.minimum(a.data, 0)))

    def bw(g):
        return (g * np.where(pos, 1.0, out + 1.0),)

    return _make(out.astype(a.dtype, copy=False), (a,), bw)


def dropout(a, p, rng, training=True):
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not training or p == 0:
        return a
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1 - p)

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw)


# --- reductions and shape ops -----------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        if _is_basic_index(idx):
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(a.data[idx]), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a, b):
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


# --- losses -----------------------------------------------------------------

def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (s - y) / n,)

    return _make(np.asarray(loss.mean(), dtype=logits.dtype), (logits,), bw)


# --- volumetric kernels -----------------------------------------------------

def conv_output_size(d, k, stride, padding):
    return (d + 2 * padding - k) // stride + 1


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation. x: (N, C, X, Y, Z), w: (O, C, k, k, k), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    k = w.shape[2]
    out_sp = tuple(conv_output_size(d, k, stride, padding) for d in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d output spatial dims {out_sp} are not positive")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x.data)
    out = kernels.conv3d_forward(xp, w.data, stride, out_sp)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, -1, 1, 1, 1)
        parents = (x, w, b)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            dxp = kernels.conv3d_backward_input(g, w.data, stride, xp.shape)
            gx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3], p : p + x.shape[4]] if p else dxp
        gw = kernels.conv3d_backward_weight(xp, g, stride, k) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _make(out, parents, bw)


def conv_transpose3d_1x1(x, w, b=None):
    """Stride-1, 1x1x1 transposed convolution: per-voxel channel mixing.

    ``w`` has shape (C_in, C_out), the transposed-convolution weight layout.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d_1x1 mismatch: input {x.shape}, weight {w.shape}")
    out = np.moveaxis(np.tensordot(x.data, w.data, axes=([1], [0])), 4, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, -1, 1, 1, 1)
        parents = (x, w, b)

    def bw(g):
        gx = np.moveaxis(np.tensordot(g, w.data, axes=([1], [1])), 4, 1)
        gw = np.tensordot(x.data, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _make(out, parents, bw)


def interpolation_matrix(n_in, n_out, dtype=np.float64):
    """Linear-interpolation weights (n_out, n_in), half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for dst in range(n_out):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m


def _apply_axis(arr, mat, axis):
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def trilinear_resize(x, size):
    """Resize the three trailing spatial axes of (N, C, X, Y, Z) to ``size``."""
    x = as_tensor(x)
    size = tuple(int(s) for s in size)
    if x.ndim != 5 or len(size) != 3 or min(size) < 1:
        raise ShapeError(f"bad trilinear_resize request {x.shape} -> {size}")
    mats = [interpolation_matrix(n_in, n_out, x.dtype) for n_in, n_out in zip(x.shape[2:], size)]
    out = x.data
    for axis, m in zip((2, 3, 4), mats):
        if m.shape[0] != m.shape[1]:
            out = _apply_axis(out, m, axis)

    def bw(g):
        for axis, m in zip((2, 3, 4), mats):
            if m.shape[0] != m.shape[1]:
                g = _apply_axis(g, m.T, axis)
        return (g,)

    return _make(np.ascontiguousarray(out), (x,), bw)


def weight_normalize(v, g):
    """w = g * v / ||v|| with one norm and one gain per output channel (axis 0)."""
    v, g = as_tensor(v), as_tensor(g)
    if g.shape != (v.shape[0],):
        raise ShapeError(f"gain shape {g.shape} does not match {v.shape[0]} output channels")
    axes = tuple(range(1, v.ndim))
    bshape = (-1,) + (1,) * (v.ndim - 1)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axes))
    if np.any(norm == 0):
        bad = int(np.flatnonzero(norm == 0)[0])
        raise NumericError(f"zero-norm weight direction in output channel {bad}")
    scale = (g.data / norm).reshape(bshape)
    out = scale * v.data

    def bw(gw):
        dot = np.sum(gw * v.data, axis=axes)
        gg = dot / norm
        gv = scale * (gw - v.data * (dot / norm**2).reshape(bshape))
        return gv, gg

    return _make(out.astype(v.dtype, copy=False), (v, g), bw)
