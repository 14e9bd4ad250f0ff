# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct 3D convolution loops on pre-padded C-contiguous buffers.

Loop order keeps the innermost loop on the contiguous z axis. Every output
element is accumulated by a single fixed-order loop, so results are
reproducible bit for bit.
"""
from cython cimport floating


def conv3d_forward(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] wt,
                   floating[:, :, :, :, ::1] out, int stride):
    """``wt`` is the weight transposed to (C, K, K, K, O)."""
    cdef Py_ssize_t N = out.shape[0], O = out.shape[1]
    cdef Py_ssize_t Xo = out.shape[2], Yo = out.shape[3], Zo = out.shape[4]
    cdef Py_ssize_t C = wt.shape[0], K = wt.shape[1]
    cdef Py_ssize_t n, o, c, i, j, l, x, y, z
    cdef floating wv
    cdef floating* orow
    cdef floating* irow
    with nogil:
        for n in range(N):
            for x in range(Xo):
                for y in range(Yo):
                    for c in range(C):
                        for i in range(K):
                            for j in range(K):
                                for l in range(K):
                                    irow = &xp[n, c, x * stride + i, y * stride + j, l]
                                    for o in range(O):
                                        wv = wt[c, i, j, l, o]
                                        orow = &out[n, o, x, y, 0]
                                        for z in range(Zo):
                                            orow[z] += wv * irow[z * stride]


def conv3d_backward_input(floating[:, :, :, :, ::1] dout, floating[:, :, :, :, ::1] w,
                          floating[:, :, :, :, ::1] dxp, int stride):
    cdef Py_ssize_t N = dout.shape[0], O = dout.shape[1]
    cdef Py_ssize_t Xo = dout.shape[2], Yo = dout.shape[3], Zo = dout.shape[4]
    cdef Py_ssize_t C = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t n, o, c, i, j, l, x, y, z
    cdef floating wv
    cdef floating* grow
    cdef floating* drow
    with nogil:
        for n in range(N):
            for x in range(Xo):
                for y in range(Yo):
                    for o in range(O):
                        grow = &dout[n, o, x, y, 0]
                        for c in range(C):
                            for i in range(K):
                                for j in range(K):
                                    for l in range(K):
                                        wv = w[o, c, i, j, l]
                                        drow = &dxp[n, c, x * stride + i, y * stride + j, l]
                                        for z in range(Zo):
                                            drow[z * stride] += wv * grow[z]


def conv3d_backward_weight(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] dout,
                           floating[:, :, :, :, ::1] dw, int stride):
    cdef Py_ssize_t N = dout.shape[0], O = dout.shape[1]
    cdef Py_ssize_t Xo = dout.shape[2], Yo = dout.shape[3], Zo = dout.shape[4]
    cdef Py_ssize_t C = dw.shape[1], K = dw.shape[2]
    cdef Py_ssize_t n, o, c, i, j, l, x, y, z
    cdef floating acc
    cdef floating* grow
    cdef floating* irow
    with nogil:
        for o in range(O):
            for c in range(C):
                for i in range(K):
                    for j in range(K):
                        for l in range(K):
                            acc = 0
                            for n in range(N):
                                for x in range(Xo):
                                    for y in range(Yo):
                                        grow = &dout[n, o, x, y, 0]
                                        irow = &xp[n, c, x * stride + i, y * stride + j, l]
                                        for z in range(Zo):
                                            acc = acc + grow[z] * irow[z * stride]
                            dw[o, c, i, j, l] = acc


# Stride-1 kernels on the padded row pitch. Output lives in a buffer shaped
# (N, O, Xo, Yp, Zp) so each kernel tap is a constant flat offset into the
# padded input; the columns beyond (Yo, Zo) are scratch and get cropped.
# Work proceeds in chunks of the flat output so the running sums stay in L1.

DEF CHUNK = 512


def conv3d_forward_s1(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
                      floating[:, :, :, :, ::1] out, Py_ssize_t yo, Py_ssize_t zo):
    cdef Py_ssize_t N = out.shape[0], O = out.shape[1], Xo = out.shape[2]
    cdef Py_ssize_t Yp = xp.shape[3], Zp = xp.shape[4]
    cdef Py_ssize_t C = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t plane = Yp * Zp
    cdef Py_ssize_t L = (Xo - 1) * plane + (yo - 1) * Zp + zo
    cdef Py_ssize_t n, o, c, i, j, l, q, q0, m, shift
    cdef floating wv
    cdef floating acc[CHUNK]
    cdef floating* iptr
    with nogil:
        for n in range(N):
            for o in range(O):
                for q0 in range(0, L, CHUNK):
                    m = min(CHUNK, L - q0)
                    for q in range(m):
                        acc[q] = 0
                    for c in range(C):
                        for i in range(K):
                            for j in range(K):
                                for l in range(K):
                                    wv = w[o, c, i, j, l]
                                    shift = i * plane + j * Zp + l
                                    iptr = &xp[n, c, 0, 0, 0] + shift + q0
                                    for q in range(m):
                                        acc[q] += wv * iptr[q]
                    iptr = &out[n, o, 0, 0, 0] + q0
                    for q in range(m):
                        iptr[q] = acc[q]


def conv3d_backward_weight_s1(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] gbuf,
                              floating[:, :, :, :, ::1] dw, Py_ssize_t yo, Py_ssize_t zo):
    """``gbuf`` is the output gradient on the padded pitch with zeroed scratch columns."""
    cdef Py_ssize_t N = gbuf.shape[0], O = gbuf.shape[1], Xo = gbuf.shape[2]
    cdef Py_ssize_t Yp = xp.shape[3], Zp = xp.shape[4]
    cdef Py_ssize_t C = dw.shape[1], K = dw.shape[2]
    cdef Py_ssize_t plane = Yp * Zp
    cdef Py_ssize_t L = (Xo - 1) * plane + (yo - 1) * Zp + zo
    cdef Py_ssize_t n, o, c, i, j, l, q, q0, m, shift
    cdef floating s
    cdef floating* gptr
    cdef floating* iptr
    with nogil:
        for n in range(N):
            for o in range(O):
                for q0 in range(0, L, CHUNK):
                    m = min(CHUNK, L - q0)
                    gptr = &gbuf[n, o, 0, 0, 0] + q0
                    for c in range(C):
                        for i in range(K):
                            for j in range(K):
                                for l in range(K):
                                    shift = i * plane + j * Zp + l
                                    iptr = &xp[n, c, 0, 0, 0] + shift + q0
                                    s = 0
                                    for q in range(m):
                                        s = s + gptr[q] * iptr[q]
                                    dw[o, c, i, j, l] += s
