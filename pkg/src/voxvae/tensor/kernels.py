"""Backend dispatch for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. ``VOXVAE_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("VOXVAE_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _conv
except ImportError:
    _conv = None

_backend = {"name": "compiled" if _conv is not None else "numpy"}


def backend():
    return _backend["name"]


def compiled_available():
    return _conv is not None


def use_backend(name):
    if name == "compiled" and _conv is None:
        raise ImportError("compiled kernels are not built")
    if name not in ("compiled", "numpy"):
        raise ValueError(name)
    _backend["name"] = name


# Below this many output voxels per channel, BLAS-backed im2col beats the direct loops.
DIRECT_MIN_VOXELS = 64
# The generic strided loops lose to im2col (see benchmarks/bench_kernels.py); only
# the stride-1 kernels, which use a flat shifted-row layout, are dispatched by default.
COMPILED_STRIDES = (1,)


def _use_numpy(out_spatial, stride):
    return (
        _backend["name"] == "numpy"
        or stride not in COMPILED_STRIDES
        or int(np.prod(out_spatial)) < DIRECT_MIN_VOXELS
    )


def _grad_buffer(dout, padded_shape):
    n, o, xo, yo, zo = dout.shape
    buf = np.zeros((n, o, xo, padded_shape[3], padded_shape[4]), dtype=dout.dtype)
    buf[:, :, :, :yo, :zo] = dout
    return buf


def conv3d_forward(xp, w, stride, out_shape):
    if _use_numpy(out_shape, stride):
        return _kernels_py.conv3d_forward(xp, w, stride, out_shape)
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    n, o = xp.shape[0], w.shape[0]
    if stride == 1:
        xo, yo, zo = out_shape
        buf = np.zeros((n, o, xo, xp.shape[3], xp.shape[4]), dtype=xp.dtype)
        _conv.conv3d_forward_s1(xp, w, buf, yo, zo)
        return np.ascontiguousarray(buf[:, :, :, :yo, :zo])
    out = np.zeros((n, o) + tuple(out_shape), dtype=xp.dtype)
    _conv.conv3d_forward(xp, np.ascontiguousarray(np.moveaxis(w, 0, 4)), out, stride)
    return out


def conv3d_backward_input(dout, w, stride, padded_shape):
    if _use_numpy(dout.shape[2:], stride):
        return _kernels_py.conv3d_backward_input(dout, w, stride, padded_shape)
    w = np.ascontiguousarray(w)
    if stride == 1:
        # Full correlation of the output gradient with the flipped, transposed kernel.
        k = w.shape[2]
        gp = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1), (k - 1, k - 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        buf = np.zeros((dout.shape[0], wf.shape[0], padded_shape[2], gp.shape[3], gp.shape[4]), dtype=dout.dtype)
        _conv.conv3d_forward_s1(gp, wf, buf, padded_shape[3], padded_shape[4])
        return np.ascontiguousarray(buf[:, :, :, : padded_shape[3], : padded_shape[4]])
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    _conv.conv3d_backward_input(np.ascontiguousarray(dout), w, dxp, stride)
    return dxp


def conv3d_backward_weight(xp, dout, stride, k):
    if _use_numpy(dout.shape[2:], stride):
        return _kernels_py.conv3d_backward_weight(xp, dout, stride, k)
    xp = np.ascontiguousarray(xp)
    dw = np.zeros((dout.shape[1], xp.shape[1], k, k, k), dtype=xp.dtype)
    if stride == 1:
        _conv.conv3d_backward_weight_s1(xp, _grad_buffer(dout, xp.shape), dw, dout.shape[3], dout.shape[4])
    else:
        _conv.conv3d_backward_weight(xp, np.ascontiguousarray(dout), dw, stride)
    return dw
