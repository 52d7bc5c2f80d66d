"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature.  These
are the fallback path and the reference the accelerated path is tested
against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def pool_out_size(size, k, stride, pad):
    """Ceil-mode pooling extent; the last window must start inside input + pad."""
    n = -(-(size + 2 * pad - k) // stride) + 1
    if pad and (n - 1) * stride >= size + pad:
        n -= 1
    return n


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw), rows ordered (n, oy, ox)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        img = img[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(img)


def _windows(x, k, stride, pad, fill):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def maxpool_forward(x, k, stride, pad):
    """Returns (out, argmax) where argmax is the row-major offset inside the window.

    Ties go to the first offset, which is what ``np.argmax`` does.
    """
    win = _windows(x, k, stride, pad, -np.inf)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(dout, arg, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    di, dj = np.divmod(arg, k)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    # one window never writes the same cell twice, but overlapping windows can
    np.add.at(dx, (nn, cc, rows, cols), dout)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)


def avgpool_forward(x, k, stride, pad):
    win = _windows(x, k, stride, pad, 0.0)
    n, c, oh, ow = win.shape[:4]
    s = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            s += win[:, :, :, :, i, j]
    return s / (k * k)


def avgpool_backward(dout, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    g = dout / (k * k)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)


def sample_without_replacement(probs, u, out):
    """Sequential multinomial draws with removal.

    probs: (R, M) rows summing to 1.  u: (R, K) uniforms in [0, 1), one per
    draw.  Writes the drawn indices into out (R, K).  Plain scalar loops so
    the arithmetic matches the compiled twin exactly.
    """
    r_count, m = probs.shape
    k_count = u.shape[1]
    p = np.empty(m, dtype=np.float64)
    for r in range(r_count):
        for j in range(m):
            p[j] = probs[r, j]
        for k in range(k_count):
            total = 0.0
            for j in range(m):
                total += p[j]
            target = u[r, k] * total
            acc = 0.0
            idx = -1
            last = -1
            for j in range(m):
                if p[j] > 0.0:
                    last = j
                    acc += p[j]
                    if target < acc:
                        idx = j
                        break
            if idx < 0:
                idx = last
            out[r, k] = idx
            p[idx] = 0.0
    return out
