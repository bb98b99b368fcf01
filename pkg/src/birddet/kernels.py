"""Hot numeric kernels.

Every kernel has a numba implementation (``*_jit``) and a numpy one
(``*_np``). The undecorated names dispatch on :data:`birddet._accel.HAVE_NUMBA`.
Inputs to the kernels are already padded, contiguous float64 arrays.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit


def _out_size(n, k, stride):
    return (n - k) // stride + 1


# ---------------------------------------------------------------- conv2d
#
# Both paths lower the convolution to one GEMM over an im2col matrix of
# shape (C*kH*kW, N*Ho*Wo); they differ in how columns are gathered and
# scattered back.

def _im2col_np(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _col2im_np(cols, shape, kh, kw, stride, ho, wo):
    n, c = shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    return out


@njit
def _im2col_jit(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo))
    for ic in range(c):
        for i in range(kh):
            for j in range(kw):
                r = (ic * kh + i) * kw + j
                for bi in range(n):
                    base = bi * ho * wo
                    for y in range(ho):
                        row = y * stride + i
                        for x in range(wo):
                            cols[r, base + y * wo + x] = xp[bi, ic, row, x * stride + j]
    return cols


@njit
def _col2im_jit(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp))
    for ic in range(c):
        for i in range(kh):
            for j in range(kw):
                r = (ic * kh + i) * kw + j
                for bi in range(n):
                    base = bi * ho * wo
                    for y in range(ho):
                        row = y * stride + i
                        for x in range(wo):
                            out[bi, ic, row, x * stride + j] += cols[r, base + y * wo + x]
    return out


@njit
def conv2d_forward_jit(xp, w, b, stride):
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _im2col_jit(xp, kh, kw, stride, ho, wo)
    res = np.dot(w.reshape(o, c * kh * kw), cols)
    out = np.empty((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for x in range(wo):
                    out[bi, oc, y, x] = res[oc, bi * ho * wo + y * wo + x] + b[oc]
    return out


@njit
def conv2d_backward_jit(xp, w, g, stride):
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    ho = g.shape[2]
    wo = g.shape[3]
    g2 = np.empty((o, n * ho * wo))
    gb = np.zeros(o)
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for x in range(wo):
                    v = g[bi, oc, y, x]
                    g2[oc, bi * ho * wo + y * wo + x] = v
                    gb[oc] += v
    cols = _im2col_jit(xp, kh, kw, stride, ho, wo)
    gw = np.dot(g2, cols.T).reshape(o, c, kh, kw)
    dcols = np.dot(w.reshape(o, c * kh * kw).T.copy(), g2)
    gx = _col2im_jit(dcols, n, c, hp, wp, kh, kw, stride, ho, wo)
    return gx, gw, gb


def conv2d_forward_np(xp, w, b, stride):
    """xp: (N, C, Hp, Wp) padded input, w: (O, C, kH, kW), b: (O,)."""
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    ho, wo = _out_size(xp.shape[2], kh, stride), _out_size(xp.shape[3], kw, stride)
    cols = _im2col_np(xp, kh, kw, stride, ho, wo)
    res = w.reshape(o, -1) @ cols
    return res.reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + b[None, :, None, None]


def conv2d_backward_np(xp, w, g, stride):
    """Gradients of conv2d_forward w.r.t. (xp, w, b) given upstream ``g``."""
    o, c, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    cols = _im2col_np(xp, kh, kw, stride, ho, wo)
    gw = (g2 @ cols.T).reshape(w.shape)
    gx = _col2im_np(w.reshape(o, -1).T @ g2, xp.shape, kh, kw, stride, ho, wo)
    return gx, gw, g.sum(axis=(0, 2, 3))


def conv2d_forward(xp, w, b, stride):
    if HAVE_NUMBA:
        return conv2d_forward_jit(np.ascontiguousarray(xp), np.ascontiguousarray(w),
                                  np.ascontiguousarray(b), int(stride))
    return conv2d_forward_np(xp, w, b, stride)


def conv2d_backward(xp, w, g, stride):
    if HAVE_NUMBA:
        return conv2d_backward_jit(np.ascontiguousarray(xp), np.ascontiguousarray(w),
                                   np.ascontiguousarray(g), int(stride))
    return conv2d_backward_np(xp, w, g, stride)


# ------------------------------------------------- origin-aligned box IoU

def wh_iou_matrix_np(a, b):
    """IoU of origin-aligned (w, h) boxes: a (N, 2), b (K, 2) -> (N, K)."""
    inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
    union = (a[:, 0] * a[:, 1])[:, None] + (b[:, 0] * b[:, 1])[None, :] - inter
    return inter / union


@njit
def wh_iou_matrix_jit(a, b):
    n = a.shape[0]
    k = b.shape[0]
    out = np.empty((n, k))
    for i in range(n):
        aa = a[i, 0] * a[i, 1]
        for j in range(k):
            inter = min(a[i, 0], b[j, 0]) * min(a[i, 1], b[j, 1])
            out[i, j] = inter / (aa + b[j, 0] * b[j, 1] - inter)
    return out


def wh_iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2)
    if HAVE_NUMBA:
        return wh_iou_matrix_jit(a, b)
    return wh_iou_matrix_np(a, b)
