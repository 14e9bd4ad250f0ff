"""Pure-numpy convolution kernels (im2col through strided views)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_forward(xp, w, stride, out_shape):
    """Valid correlation of an already padded input. Returns (N, O, Xo, Yo, Zo)."""
    k = w.shape[2]
    win = _windows(xp, k, stride)[:, :, : out_shape[0], : out_shape[1], : out_shape[2]]
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def conv3d_backward_weight(xp, dout, stride, k):
    xo, yo, zo = dout.shape[2:]
    win = _windows(xp, k, stride)[:, :, :xo, :yo, :zo]
    return np.tensordot(dout, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv3d_backward_input(dout, w, stride, padded_shape):
    k = w.shape[2]
    xo, yo, zo = dout.shape[2:]
    # (N, Xo, Yo, Zo, C, k, k, k)
    dcols = np.tensordot(dout, w, axes=([1], [0]))
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = np.moveaxis(dcols[..., i, j, l], 4, 1)
                dxp[:, :, i : i + s * xo : s, j : j + s * yo : s, l : l + s * zo : s] += patch
    return dxp
