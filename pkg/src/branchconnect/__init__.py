"""Multi-branch CNNs with learned class-to-branch gates, trained on numpy."""
__version__ = "0.1.0"

from .arch import (ArchSpecError, BaseArchSpec, BranchNetSpec, count_parameters,  # noqa: F401
                   load_branchnet, parse_arch_spec, reshape_to_branchconnect)
from .gates import GateBank  # noqa: F401
from .kernels import BACKEND  # noqa: F401
from .network import NetworkState, forward, init_network  # noqa: F401
from .trainer import TrainConfig, evaluate, train_loop, train_step  # noqa: F401
