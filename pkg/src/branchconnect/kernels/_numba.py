"""numba-compiled kernels, signature-compatible with ``_numpy``.

Loop order is fixed, so results are bitwise reproducible run to run.  No
``parallel=True``: the trainer needs deterministic reductions.
"""
import numpy as np
from numba import njit

from ._numpy import im2col as _im2col_np, out_size, sample_without_replacement as _sample_py

_jit = njit(cache=True, nogil=True)


# im2col is one memory-bound strided copy; numpy's transposed copy of the
# window view beat every compiled loop order tried, so it is reused as is.
im2col = _im2col_np


@_jit
def _col2im(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    img = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride + i - pad
                        for j in range(kw):
                            xx = ox * stride + j - pad
                            if 0 <= y < h and 0 <= xx < w:
                                img[b, ch, y, xx] += cols[row, col]
                            col += 1
    return img


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    return _col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, oh, ow)


@_jit
def _maxpool_forward(x, k, stride, pad, oh, ow):
    n, c, h, w = x.shape
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = -np.inf
                    best_at = 0
                    first = True
                    for i in range(k):
                        y = oy * stride + i - pad
                        for j in range(k):
                            xx = ox * stride + j - pad
                            if 0 <= y < h and 0 <= xx < w:
                                v = x[b, ch, y, xx]
                            else:
                                v = -np.inf
                            # strict > keeps the first row-major maximum
                            if first or v > best:
                                best = v
                                best_at = i * k + j
                                first = False
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = best_at
    return out, arg


def maxpool_forward(x, k, stride, pad):
    oh = out_size(x.shape[2], k, stride, pad)
    ow = out_size(x.shape[3], k, stride, pad)
    return _maxpool_forward(np.ascontiguousarray(x), k, stride, pad, oh, ow)


@_jit
def _maxpool_backward(dout, arg, n, c, h, w, k, stride, pad):
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = arg[b, ch, oy, ox]
                    y = oy * stride + a // k - pad
                    xx = ox * stride + a % k - pad
                    if 0 <= y < h and 0 <= xx < w:
                        dx[b, ch, y, xx] += dout[b, ch, oy, ox]
    return dx


def maxpool_backward(dout, arg, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    return _maxpool_backward(np.ascontiguousarray(dout), np.ascontiguousarray(arg),
                             n, c, h, w, k, stride, pad)


@_jit
def _avgpool_forward(x, k, stride, pad, oh, ow):
    n, c, h, w = x.shape
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    area = k * k
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    s = 0.0
                    for i in range(k):
                        y = oy * stride + i - pad
                        for j in range(k):
                            xx = ox * stride + j - pad
                            if 0 <= y < h and 0 <= xx < w:
                                s += x[b, ch, y, xx]
                    out[b, ch, oy, ox] = s / area
    return out


def avgpool_forward(x, k, stride, pad):
    oh = out_size(x.shape[2], k, stride, pad)
    ow = out_size(x.shape[3], k, stride, pad)
    return _avgpool_forward(np.ascontiguousarray(x), k, stride, pad, oh, ow)


@_jit
def _avgpool_backward(dout, n, c, h, w, k, stride, pad):
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    area = k * k
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    g = dout[b, ch, oy, ox] / area
                    for i in range(k):
                        y = oy * stride + i - pad
                        for j in range(k):
                            xx = ox * stride + j - pad
                            if 0 <= y < h and 0 <= xx < w:
                                dx[b, ch, y, xx] += g
    return dx


def avgpool_backward(dout, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    return _avgpool_backward(np.ascontiguousarray(dout), n, c, h, w, k, stride, pad)


sample_without_replacement = _jit(_sample_py)
