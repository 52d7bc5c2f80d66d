import logging

import numpy as np
import pytest

from branchconnect import arch, network

TINY_BASE = """\
INPUT: 3x8x8
INIT: MSRA
CONV: 3x3,8
CONV: 3x3,8
FC: 16
FC: 4
"""

TINY_SECTIONED = """\
INPUT: 3x8x8
INIT: MSRA
STEM
CONV: 3x3,8
BRANCH
CONV: 3x3,8
FC: 16
HEAD
FC_Gates: 4
"""

NIN_BASE = """\
INPUT: 3x8x8
INIT: MSRA
CONV: 3x3,6
POOL: 3x3,Max,2
CONV: 3x3,6
CONV: 1x1,4
POOL: global,Ave
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return arch.load_branchnet(TINY_SECTIONED, 2, 1)


def make_state(M=2, K=1, seed=0, text=TINY_SECTIONED, dtype="float64"):
    return network.init_network(arch.load_branchnet(text, M, K), seed, dtype)


@pytest.fixture(autouse=True)
def _quiet_arch_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="branchconnect")


# ---------------------------------------------------------------- acceptance report

CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
