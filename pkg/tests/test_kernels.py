"""The compiled and numpy backends must agree bit for bit (pooling, sampling)
or to rounding (im2col matmul paths)."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchconnect import kernels
from branchconnect.kernels import _numba as nb
from branchconnect.kernels import _numpy as npk

shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9))


def _arr(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.integers(1, 3), stride=st.integers(1, 2), pad=st.integers(0, 1),
       seed=st.integers(0, 2**16))
def test_im2col_col2im_backends_agree(shape, k, stride, pad, seed):
    x = _arr(seed, shape)
    if k > shape[2] + 2 * pad or k > shape[3] + 2 * pad:
        return
    a, b = npk.im2col(x, k, k, stride, pad), nb.im2col(x, k, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    cols = _arr(seed + 1, a.shape)
    np.testing.assert_allclose(npk.col2im(cols, shape, k, k, stride, pad),
                               nb.col2im(cols, shape, k, k, stride, pad), rtol=1e-13, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 1),
       seed=st.integers(0, 2**16), ties=st.booleans())
def test_pool_backends_agree(shape, k, stride, pad, seed, ties):
    if k > shape[2] + 2 * pad or k > shape[3] + 2 * pad or pad >= k:
        return
    x = _arr(seed, shape)
    if ties:
        x = np.round(x)  # many equal values: exercises the first-argmax rule
    o1, a1 = npk.maxpool_forward(x, k, stride, pad)
    o2, a2 = nb.maxpool_forward(x, k, stride, pad)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    g = _arr(seed + 2, o1.shape)
    np.testing.assert_array_equal(npk.maxpool_backward(g, a1, shape, k, stride, pad),
                                  nb.maxpool_backward(g, a2, shape, k, stride, pad))
    np.testing.assert_allclose(npk.avgpool_forward(x, k, stride, pad),
                               nb.avgpool_forward(x, k, stride, pad), rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(npk.avgpool_backward(g, shape, k, stride, pad),
                               nb.avgpool_backward(g, shape, k, stride, pad), rtol=1e-14, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(M=st.integers(1, 6), seed=st.integers(0, 2**16), data=st.data())
def test_sampler_backends_identical(M, seed, data):
    K = data.draw(st.integers(1, M))
    rng = np.random.default_rng(seed)
    p = rng.random((5, M)) + 1e-8
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random((5, K))
    a = np.empty((5, K), dtype=np.int64)
    b = np.empty((5, K), dtype=np.int64)
    npk.sample_without_replacement(p, u, a)
    nb.sample_without_replacement(p, u, b)
    np.testing.assert_array_equal(a, b)
    for row in a:
        assert len(set(row.tolist())) == K


def test_sampler_inverse_cdf():
    out = np.empty((1, 2), dtype=np.int64)
    p = np.array([[0.6, 0.2, 0.1, 0.1]])
    # first draw at 0.7 lands in [0.6, 0.8) -> index 1; second draw renormalizes
    # the remaining mass [0.6, 0, 0.1, 0.1] and 0.9*0.8 = 0.72 falls in index 3
    kernels.sample_without_replacement(p, np.array([[0.7, 0.9]]), out)
    assert out.tolist() == [[1, 3]]


def test_sampler_floor_entries_can_be_drawn():
    # a row of all-but-zero probability still yields K distinct indices
    p = np.full((1, 3), 1 / 3)
    out = np.empty((1, 3), dtype=np.int64)
    kernels.sample_without_replacement(p, np.array([[0.999999, 0.999999, 0.999999]]), out)
    assert sorted(out[0].tolist()) == [0, 1, 2]


def test_pool_out_size_matches_ceil_rule():
    assert kernels.pool_out_size(32, 3, 2, 0) == 16
    assert kernels.pool_out_size(16, 3, 2, 0) == 8
    assert kernels.pool_out_size(8, 3, 2, 0) == 4
    assert kernels.pool_out_size(4, 2, 2, 0) == 2
    # with padding the last window must start inside input + pad
    assert kernels.pool_out_size(4, 2, 2, 1) == 3


@pytest.mark.parametrize("value,expected", [("1", "numpy"), ("true", "numpy"), ("", "numba"), ("0", "numba")])
def test_env_flag_selects_backend(value, expected):
    env = dict(os.environ, BRANCHCONNECT_DISABLE_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", "import branchconnect.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_training_identical_across_backends(tmp_path):
    """Same seed on both backends gives the same training trajectory."""
    script = (
        "import sys, logging; logging.disable(logging.WARNING)\n"
        "from branchconnect import arch, data, network, trainer\n"
        f"text = {TINY!r}\n"
        "spec = arch.load_branchnet(text, 3, 2)\n"
        "ds = data.generate_synthetic(4, 10, 8, seed=0, noise=0.5)\n"
        "tr, te = data.split(ds, 24, 16, seed=0)\n"
        "cfg = trainer.TrainConfig(lr_schedule=[(0, 0.05)], max_iters=12, eval_every=4, batch_size=8)\n"
        "trainer.train_loop(network.init_network(spec, 0), tr, te, cfg, metrics_path=sys.argv[1])\n"
    )
    outs = []
    for flag in ("1", "0"):
        path = tmp_path / f"m{flag}.csv"
        env = dict(os.environ, BRANCHCONNECT_DISABLE_NUMBA=flag)
        subprocess.run([sys.executable, "-c", script, str(path)], env=env, check=True)
        outs.append(path.read_text())
    a, b = (np.array([[float(v) for v in line.split(",")] for line in o.splitlines()[1:]]) for o in outs)
    # col2im accumulation order differs between backends, so allow rounding
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


TINY = """\
INPUT: 3x8x8
INIT: MSRA
STEM
CONV: 3x3,4
POOL: 3x3,Max,2
BRANCH
CONV: 3x3,4
POOL: 2x2,Ave,2
FC: 8
HEAD
FC_Gates: 4
"""

