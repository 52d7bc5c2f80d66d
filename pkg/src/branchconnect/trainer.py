"""Training: stochastic-gate forward, backprop, momentum SGD for weights and a
bare clipped step for the real gates; staged learning rates; evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import Batch, Dataset, preprocess
from .gates import GateBank, update_real_gates
from .network import NetworkState, forward

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "train_loss", "test_loss", "test_acc", "lr", "wall_ms")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_schedule: list = field(default_factory=lambda: [(0, 0.001)])
    gate_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.004
    batch_size: int = 64
    max_iters: int = 1000
    seed: int = 0
    eval_every: int = 100
    crop: int | None = None
    mirror: bool = False
    eval_batch_size: int = 200
    wall_clock: bool = False  # off keeps metrics files byte-reproducible

    def __post_init__(self):
        self.lr_schedule = [(int(i), float(r)) for i, r in self.lr_schedule]
        its = [i for i, _ in self.lr_schedule]
        if not self.lr_schedule or its[0] != 0:
            raise ValueError("lr schedule must start at iteration 0")
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError(f"lr schedule iterations must strictly increase: {its}")
        if any(r <= 0 or not math.isfinite(r) for _, r in self.lr_schedule):
            raise ValueError("learning rates must be finite and positive")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.max_iters < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, max_iters >= 0")
        if self.gate_lr_multiplier < 0 or self.weight_decay < 0:
            raise ValueError("gate_lr_multiplier and weight_decay must be >= 0")

    def lr_at(self, iteration):
        """Rate used by update number ``iteration`` (1-based; 0 reports the initial rate)."""
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if iteration >= start:
                rate = r
        return rate

    def to_dict(self):
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d


@dataclass
class MetricsRecord:
    iteration: int
    train_loss: float
    test_loss: float | None
    test_accuracy: float | None
    lr: float
    wall_ms: int = 0

    def row(self):
        def f(v):
            return "" if v is None else repr(float(v))
        return [str(self.iteration), f(self.train_loss), f(self.test_loss),
                f(self.test_accuracy), f(self.lr), str(int(self.wall_ms))]


def sgd_momentum(w, g, v, lr, momentum, weight_decay):
    """v <- momentum*v - lr*(g + wd*w); w <- w + v.  Returns (w, v)."""
    v = momentum * v - lr * (g + weight_decay * w)
    return w + v, v


def train_step(state: NetworkState, batch: Batch, cfg: TrainConfig, rng, lr=None):
    """One iteration; returns the minibatch loss measured before the update."""
    lr = cfg.lr_schedule[0][1] if lr is None else lr
    state.zero_grad()
    with ad.Tape() as tape:
        logits, gate_t = forward(state, batch.images, "train", rng)
        loss = ad.softmax_cross_entropy(logits, batch.labels, name="loss")
    value = loss.item()
    if not math.isfinite(value):
        bad = ad.first_nonfinite(tape) or "loss"
        raise NonFiniteError(f"non-finite loss {value}; first non-finite tensor: {bad}")
    ad.backward(tape, loss)
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            bad = ad.first_nonfinite(tape)
            where = f"; first non-finite tensor: {bad}" if bad else ""
            raise NonFiniteError(f"non-finite gradient for {name}{where}")
        p.data, state.momentum[name] = sgd_momentum(
            p.data, g, state.momentum[name], lr, cfg.momentum, cfg.weight_decay)
    bank = state.gates
    if not bank.frozen:
        bank.gate_grad = gate_t.grad.astype(np.float64) if gate_t.grad is not None \
            else np.zeros_like(bank.real)
        update_real_gates(bank, cfg.gate_lr_multiplier * lr)
    return value


def evaluate(state: NetworkState, ds: Dataset, batch_size=200, crop=None):
    """Mean cross-entropy and top-1 accuracy with deterministic top-K gates."""
    n = len(ds)
    if n == 0:
        raise ValueError(f"cannot evaluate on empty dataset {ds.name!r}")
    loss_sum = 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        x = preprocess(ds.images[lo:lo + batch_size], ds.mean_image, crop=crop, mode="eval")
        y = ds.labels[lo:lo + batch_size]
        logits, _ = forward(state, x, "infer")
        lsm = ad.log_softmax(logits.data.astype(np.float64))
        loss_sum += -lsm[np.arange(len(y)), y].sum()
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return loss_sum / n, correct / n


def make_random_connect(state: NetworkState, K: int, seed: int) -> NetworkState:
    """Copy of ``state`` with each class permanently wired to K random branches."""
    out = state.copy()
    M, C = out.gates.M, out.gates.C
    rng = np.random.default_rng(seed)
    binary = np.zeros((C, M))
    for c in range(C):
        binary[c, rng.choice(M, size=K, replace=False)] = 1.0
    out.gates = GateBank(C, M, K, real=binary.copy(), binary=binary, frozen=True)
    out.spec = replace(out.spec, K=K)
    return out


class BatchStream:
    """Seeded epoch shuffles; a new permutation when fewer than a full batch remains."""

    def __init__(self, n, batch_size, order=None, cursor=0):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.order = order
        self.cursor = cursor

    def next(self, rng):
        if self.order is None or self.cursor + self.batch_size > self.n:
            self.order = rng.permutation(self.n)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, rec: MetricsRecord):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.row())


def read_metrics(path):
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for r in reader:
            def opt(v):
                return float(v) if v != "" else None
            rows.append(MetricsRecord(int(r["iter"]), float(r["train_loss"]), opt(r["test_loss"]),
                                      opt(r["test_acc"]), float(r["lr"]), int(r["wall_ms"])))
    return rows


def train_loop(state: NetworkState, train: Dataset, test: Dataset | None, cfg: TrainConfig,
               rng=None, metrics_path=None, checkpoint_path=None, start_iteration=0,
               stream: BatchStream | None = None, on_step=None):
    """Train up to update ``cfg.max_iters``; returns (records, state).

    Resuming passes the checkpointed ``rng``, ``stream`` and ``start_iteration``.

    A record is written at iteration 0, every ``eval_every`` updates and after
    the last update.  Its ``train_loss`` is the mean minibatch loss since the
    previous record (at iteration 0: the training-set loss before any update).
    ``on_step(iteration, state)`` is called after every update.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    stream = stream or BatchStream(len(train), cfg.batch_size)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    t0 = time.perf_counter()
    records = []

    def emit(it, train_loss):
        test_loss = test_acc = None
        if test is not None and len(test):
            test_loss, test_acc = evaluate(state, test, cfg.eval_batch_size, cfg.crop)
        wall = int((time.perf_counter() - t0) * 1000) if cfg.wall_clock else 0
        rec = MetricsRecord(it, train_loss, test_loss, test_acc, cfg.lr_at(it), wall)
        records.append(rec)
        if writer:
            writer.append(rec)
        log.info("iter %d train %.4f test %s acc %s", it, train_loss,
                 "-" if test_loss is None else f"{test_loss:.4f}",
                 "-" if test_acc is None else f"{test_acc:.3f}")

    if start_iteration == 0:
        emit(0, evaluate(state, train, cfg.eval_batch_size, cfg.crop)[0])
    window = []
    end = cfg.max_iters
    for it in range(start_iteration + 1, end + 1):
        idx = stream.next(rng)
        x = preprocess(train.images[idx], train.mean_image, cfg.crop, cfg.mirror, "train", rng)
        window.append(train_step(state, Batch(x, train.labels[idx]), cfg, rng, cfg.lr_at(it)))
        if on_step is not None:
            on_step(it, state)
        if it % cfg.eval_every == 0 or it == end:
            emit(it, float(np.mean(window)))
            window = []
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, rng,
                        extra={"iteration": end, "cursor": stream.cursor,
                               "train_config": cfg.to_dict()},
                        arrays={"order": stream.order if stream.order is not None
                                else np.zeros(0, dtype=np.int64)})
    return records, state
