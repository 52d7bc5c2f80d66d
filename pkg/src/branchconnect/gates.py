"""Class-specific branch gates and the gated classifier head.

Each class c owns a real-valued gate row ``real[c]`` in [0, 1]^M.  During
training the row is normalized and K distinct branches are drawn from it
(sequentially, without replacement) to form the binary row ``binary[c]``.
At inference the K largest real gates are used instead.  Class c's
classifier neuron sees ``F_c = sum_m binary[c, m] * E_m``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import ShapeError, Tensor, _emit

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8
HEAD_KINDS = ("fc_gates", "conv_gates")


@dataclass
class GateBank:
    C: int
    M: int
    K: int
    real: np.ndarray = None
    binary: np.ndarray = None
    gate_grad: np.ndarray = None
    frozen: bool = False  # Random-Connect: binary fixed, no updates

    def __post_init__(self):
        if self.M < 1 or self.C < 1:
            raise ValueError(f"need C >= 1 and M >= 1 (got C={self.C}, M={self.M})")
        if not 1 <= self.K <= self.M:
            raise ValueError(f"K must satisfy 1 <= K <= M (got K={self.K}, M={self.M})")
        if self.M >= self.C and self.M > 1:
            log.warning("M=%d branches for C=%d classes; M < C is recommended", self.M, self.C)
        shape = (self.C, self.M)
        if self.real is None:
            self.real = np.full(shape, 0.5)
        if self.binary is None:
            self.binary = binarize_deterministic(self)
        if self.gate_grad is None:
            self.gate_grad = np.zeros(shape)
        for name in ("real", "binary", "gate_grad"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"gate {name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    def copy(self):
        return GateBank(self.C, self.M, self.K, self.real.copy(), self.binary.copy(),
                        self.gate_grad.copy(), self.frozen)

    def branch_load(self, binary=None):
        """How many classes select each branch."""
        b = self.binary if binary is None else binary
        return b.sum(axis=0).astype(np.int64)


def normalize_row(row):
    """Floor at 1e-8 then divide by the sum.  Does not touch the stored gates."""
    p = np.maximum(np.asarray(row, dtype=np.float64), PROB_FLOOR)
    return p / p.sum()


def _normalize_rows(real):
    p = np.maximum(real, PROB_FLOOR)
    return p / p.sum(axis=1, keepdims=True)


def sample_active_set(probs, K, rng):
    """K distinct indices drawn sequentially from ``probs`` with removal.

    Consumes exactly K uniforms from ``rng``.  Returns the indices in draw
    order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    M = probs.shape[0]
    if not 1 <= K <= M:
        raise ValueError(f"cannot draw K={K} distinct samples from M={M} branches")
    out = np.empty((1, K), dtype=np.int64)
    u = rng.random((1, K))
    kernels.sample_without_replacement(probs[None, :], u, out)
    return out[0]


def binarize_stochastic(bank: GateBank, rng):
    """Resample ``bank.binary`` from the normalized real gates, row by row.

    Row c consumes uniforms c*K .. c*K+K-1 of this call's stream slice, which
    is the same stream as calling :func:`sample_active_set` once per row.
    """
    if bank.frozen:
        return bank.binary
    probs = _normalize_rows(bank.real)
    u = rng.random((bank.C, bank.K))
    idx = np.empty((bank.C, bank.K), dtype=np.int64)
    kernels.sample_without_replacement(probs, u, idx)
    binary = np.zeros((bank.C, bank.M))
    np.put_along_axis(binary, idx, 1.0, axis=1)
    bank.binary = binary
    return binary


def binarize_deterministic(bank: GateBank):
    """Top-K real gates per row, ties to the lowest branch index.  No rng."""
    if bank.frozen:
        return bank.binary.copy()
    order = np.argsort(-bank.real, axis=1, kind="stable")[:, :bank.K]
    binary = np.zeros((bank.C, bank.M))
    np.put_along_axis(binary, order, 1.0, axis=1)
    return binary


def update_real_gates(bank: GateBank, lr):
    """Plain gradient step on the real gates, then clip to [0, 1]."""
    if bank.frozen:
        return bank.real
    bank.real = np.clip(bank.real - lr * bank.gate_grad, 0.0, 1.0)
    return bank.real


# ---------------------------------------------------------------- fusion + head


def _stack(branches):
    shapes = {np.shape(e) for e in branches}
    if len(shapes) != 1:
        raise ShapeError(f"branch outputs disagree in shape: {sorted(shapes)}")
    return np.stack([np.asarray(e) for e in branches])


def fuse(binary, branches):
    """F[c] = sum_m binary[c, m] * E_m, summed in branch order."""
    E = _stack(branches)
    binary = np.asarray(binary, dtype=E.dtype)
    C, M = binary.shape
    if M != E.shape[0]:
        raise ShapeError(f"gate matrix has {M} branches, got {E.shape[0]} outputs")
    expand = (slice(None),) + (None,) * (E.ndim - 1)
    F = np.zeros((C,) + E.shape[1:], dtype=E.dtype)
    for m in range(M):
        F += binary[:, m][expand] * E[m]
    return F


def _conv_weight(weight, C):
    w = np.asarray(weight)
    if w.ndim != 4 or w.shape[0] != C or w.shape[2:] != (1, 1):
        raise ShapeError(f"conv_gates head expects (C, channels, 1, 1) kernels, got {w.shape}")
    return w[:, :, 0, 0]


def head_forward(F, weight, bias, kind="fc_gates"):
    """Per-class neurons on per-class inputs.

    fc_gates:   F is (C, N, D), weight (D, C): logit[n, c] = F[c, n] . weight[:, c] + bias[c]
    conv_gates: F is (C, N, ch, H, W), weight (C, ch, 1, 1): class c's 1x1 filter
                on F[c], then global average pooling.
    """
    C = F.shape[0]
    if np.shape(bias) != (C,):
        raise ShapeError(f"head bias shape {np.shape(bias)} != ({C},)")
    if kind == "fc_gates":
        if F.ndim != 3 or np.shape(weight) != (F.shape[2], C):
            raise ShapeError(f"fc_gates head: inputs {F.shape} vs weight {np.shape(weight)}")
        return np.einsum("cnd,dc->nc", F, weight) + bias
    if kind == "conv_gates":
        w = _conv_weight(weight, C)
        if F.ndim != 5 or w.shape[1] != F.shape[2]:
            raise ShapeError(f"conv_gates head: inputs {F.shape} vs weight {np.shape(weight)}")
        maps = np.einsum("cnkhw,ck->nchw", F, w)
        return maps.reshape(maps.shape[0], C, -1).mean(axis=2) + bias
    raise ValueError(f"unknown head kind {kind!r}")


def head_backward(dlogits, binary, branches, F, weight, kind="fc_gates"):
    """Returns (dE per branch, d binary gates, d weight, d bias)."""
    E = _stack(branches)
    binary = np.asarray(binary, dtype=E.dtype)
    if kind == "fc_gates":
        dF = np.einsum("nc,dc->cnd", dlogits, weight)
        dW = np.einsum("cnd,nc->dc", F, dlogits)
    elif kind == "conv_gates":
        w = _conv_weight(weight, binary.shape[0])
        area = F.shape[3] * F.shape[4]
        dF = np.einsum("nc,ck->cnk", dlogits / area, w)[..., None, None] * np.ones(F.shape[3:])
        dW = (np.einsum("cnkhw,nc->ck", F, dlogits) / area)[:, :, None, None]
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    dE = np.einsum("cm,cn...->mn...", binary, dF)
    C, N = dF.shape[:2]
    dG = np.einsum("cnf,mnf->cm", dF.reshape(C, N, -1), E.reshape(E.shape[0], N, -1))
    db = dlogits.sum(axis=0)
    return list(dE), dG, dW, db


def gated_head(branches, gates: Tensor, weight: Tensor, bias: Tensor, kind="fc_gates", name=None):
    """Tape op: branch outputs + gate matrix -> logits.

    ``gates`` carries the binary matrix during training; its gradient is
    dloss/dg^b.  Any real values are accepted, which is how the relaxed-gate
    gradient is checked.
    """
    E = [e.data for e in branches]
    F = fuse(gates.data, E)
    logits = head_forward(F, weight.data, bias.data, kind)

    def bwd(g):
        dE, dG, dW, db = head_backward(g, gates.data, E, F, weight.data, kind)
        return (*dE, dG, dW, db)

    return _emit("gated_head", (*branches, gates, weight, bias), logits, bwd, name)
