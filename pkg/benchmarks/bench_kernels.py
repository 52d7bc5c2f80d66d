"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--no-train]

Times each kernel on AlexNet-Quick-sized tensors (batch 64, 32x32), then
times a short end-to-end training run under each backend in a subprocess,
since the backend is fixed when ``branchconnect.kernels`` is imported.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from branchconnect.kernels import _numba as nb
from branchconnect.kernels import _numpy as npk


def kernel_cases(rng):
    x = rng.standard_normal((64, 32, 32, 32))
    cols = npk.im2col(x, 5, 5, 1, 2)
    dcols = rng.standard_normal(cols.shape)
    out, arg = npk.maxpool_forward(x, 3, 2, 0)
    g = rng.standard_normal(out.shape)
    probs = rng.random((100, 10)) + 1e-8
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random((100, 5))
    idx = np.empty((100, 5), dtype=np.int64)
    return {
        "im2col 5x5": lambda m: m.im2col(x, 5, 5, 1, 2),
        "col2im 5x5": lambda m: m.col2im(dcols, x.shape, 5, 5, 1, 2),
        "maxpool fwd": lambda m: m.maxpool_forward(x, 3, 2, 0),
        "maxpool bwd": lambda m: m.maxpool_backward(g, arg, x.shape, 3, 2, 0),
        "avgpool fwd": lambda m: m.avgpool_forward(x, 3, 2, 0),
        "avgpool bwd": lambda m: m.avgpool_backward(g, x.shape, 3, 2, 0),
        "sample C=100 K=5": lambda m: m.sample_without_replacement(probs, u, idx),
    }


TRAIN_SCRIPT = """
import logging, time
logging.disable(logging.WARNING)
from branchconnect import arch, data, kernels, network, trainer
text = open({arch!r}).read()
spec = arch.reshape_to_branchconnect(arch.parse_arch_spec(text), 5, 2)
tr, _ = data.split(data.generate_synthetic(10, 40, 16, seed=0), 400, 0)
cfg = trainer.TrainConfig(lr_schedule=[(0, 0.01)], max_iters={iters}, eval_every=10**6, batch_size=32)
state = network.init_network(spec, 0)
trainer.train_loop(state, tr, None, trainer.TrainConfig(max_iters=1, batch_size=32))  # warm-up / JIT
t = time.perf_counter()
trainer.train_loop(state, tr, None, cfg)
print(kernels.BACKEND, (time.perf_counter() - t) / {iters})
"""


def bench_training(iters):
    here = os.path.dirname(os.path.abspath(__file__))
    arch_path = os.path.join(here, "..", "configs", "desk_base.arch")
    res = {}
    for flag in ("0", "1"):
        env = dict(os.environ, BRANCHCONNECT_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SCRIPT.format(arch=arch_path, iters=iters)],
                             env=env, capture_output=True, text=True, check=True)
        backend, sec = out.stdout.split()
        res[backend] = float(sec)
    return res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-iters", type=int, default=30)
    ap.add_argument("--no-train", action="store_true")
    args = ap.parse_args()

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        fn(nb)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(npk), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(nb), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.2f}x")

    if not args.no_train:
        res = bench_training(args.train_iters)
        print(f"\ntrain step (desk net, M=5, batch 32): numpy {res['numpy'] * 1e3:.1f} ms, "
              f"numba {res['numba'] * 1e3:.1f} ms, speedup {res['numpy'] / res['numba']:.2f}x")


if __name__ == "__main__":
    main()
