"""Dense tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient.  ``backward(tape, loss)`` then walks the tape in
reverse and accumulates gradients into every tensor with ``requires_grad``.

    with Tape() as tape:
        loss = softmax_cross_entropy(affine(x, w, b), y)
    backward(tape, loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tid")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tid = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __add__(self, other):
        return add(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    next_id: int = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        output._tid = (id(self), self.next_id)
        self.next_id += 1
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def owns(self, t):
        return t._tid is not None and t._tid[0] == id(self)


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    s = _stack()
    return s[-1] if s else None


def _emit(op, inputs, out_data, backward_fn, name=None):
    out = Tensor(out_data, name=name)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor):
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ValueError("loss tensor was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is not None:
                _accumulate(t, gi)


# ---------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor, name=None):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g), name)


def mul(a: Tensor, b: Tensor, name=None):
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data), name)


def scale(a: Tensor, c: float, name=None):
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,), name)


def total(a: Tensor, name=None):
    return _emit("sum", (a,), np.asarray(a.data.sum()),
                 lambda g: (np.broadcast_to(g, a.shape),), name)


def reshape(a: Tensor, shape, name=None):
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),), name)


def flatten(a: Tensor, name=None):
    return reshape(a, (a.shape[0], -1), name)


def relu(a: Tensor, name=None):
    mask = a.data > 0
    # subgradient at exactly 0 is 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0).astype(a.data.dtype),
                 lambda g: (g * mask,), name)


def affine(x: Tensor, w: Tensor, b: Tensor, name=None):
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"affine expects N×D, D×U, U; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: inner dims disagree: {x.shape} · {w.shape} + {b.shape}")

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit("affine", (x, w, b), x.data @ w.data + b.data, bwd, name)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0, name=None):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / pad={pad}")
    oh = kernels.out_size(h, kh, stride, pad)
    ow = kernels.out_size(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input (pad {pad})")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T + b.data).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (gm.T @ cols).reshape(w.shape)
        db = gm.sum(axis=0)
        dx = kernels.col2im(gm @ wmat, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        return dx, dw, db

    return _emit("conv2d", (x, w, b), np.ascontiguousarray(out), bwd, name)


def _pool_counts(size, window, stride, pad, n_out):
    """Per-output window length counted within [-pad, size + pad)."""
    start = np.arange(n_out) * stride - pad
    return np.minimum(start + window, size + pad) - start


def pool2d(x: Tensor, window: int, stride: int, kind="max", pad=0, name=None):
    """Ceil-mode pooling.

    The last window may overhang the padded input; overhang never wins a max
    and is left out of an average's divisor (padding inside ``pad`` counts).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ShapeError(f"pool2d: window and stride must be >= 1 (got {window}, {stride})")
    n, c, h, w = x.shape
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ShapeError(f"pool2d: window {window} larger than padded input {h}x{w} (pad {pad})")
    oh = kernels.pool_out_size(h, window, stride, pad)
    ow = kernels.pool_out_size(w, window, stride, pad)
    eh = (oh - 1) * stride + window - h - pad  # bottom/right padding incl. overhang
    ew = (ow - 1) * stride + window - w - pad
    fill = -np.inf if kind == "max" else 0.0
    if pad or eh or ew:
        xp = np.full((n, c, h + pad + eh, w + pad + ew), fill, dtype=x.data.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    crop = (slice(None), slice(None), slice(pad, pad + h), slice(pad, pad + w))
    if kind == "max":
        out, arg = kernels.maxpool_forward(xp, window, stride, 0)
        bwd = lambda g: (kernels.maxpool_backward(g, arg, xp.shape, window, stride, 0)[crop],)
    elif kind == "avg":
        out = kernels.avgpool_forward(xp, window, stride, 0)
        ch, cw = _pool_counts(h, window, stride, pad, oh), _pool_counts(w, window, stride, pad, ow)
        if (ch == window).all() and (cw == window).all():
            scale = None
        else:
            scale = (window * window / np.outer(ch, cw)).astype(out.dtype)
            out = out * scale

        def bwd(g):
            g = g if scale is None else g * scale
            return (kernels.avgpool_backward(g, xp.shape, window, stride, 0)[crop],)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _emit(f"pool_{kind}", (x,), out, bwd, name)


def global_avg_pool(x: Tensor, name=None):
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    area = h * w
    return _emit("gap", (x,), x.data.reshape(n, c, -1).sum(axis=2) / area,
                 lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape),), name)


def log_softmax(logits: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, name=None):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be N×C, got {logits.shape}")
    n, c = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lsm[rows, labels].sum() / n

    def bwd(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _emit("xent", (logits,), np.asarray(loss, dtype=logits.data.dtype), bwd, name)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    per_input: list  # (max, mean) per checked tensor


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps=1e-5):
    """Central differences of ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps=1e-5,
               analytic: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    ``analytic`` overrides the tape gradients, which is how tests feed in a
    deliberately wrong gradient.
    """
    if analytic is None:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            out = fn(*inputs)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        if tape.owns(out):
            backward(tape, out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value():
        out = fn(*inputs)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        return out.item()

    per_input, errs = [], []
    for t, a in zip(inputs, analytic):
        err = relative_error(a, numeric_grad(value, t.data, eps)).reshape(-1)
        errs.append(err)
        per_input.append((float(err.max(initial=0.0)), float(err.mean()) if err.size else 0.0))
    allerr = np.concatenate(errs) if errs else np.zeros(0)
    return GradCheckReport(float(allerr.max(initial=0.0)),
                           float(allerr.mean()) if allerr.size else 0.0, per_input)


def first_nonfinite(tape: Tape):
    """Name of the first tensor on the tape holding NaN/Inf, or None."""
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            if not np.all(np.isfinite(t.data)):
                return t.name or f"input of node {i} ({node.op})"
        if not np.all(np.isfinite(node.output.data)):
            return node.output.name or f"output of node {i} ({node.op})"
    return None
