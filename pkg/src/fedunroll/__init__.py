"""fedunroll: personalized federated learning by unrolling a consensus
splitting scheme into a trainable network, plus reference federated
methods and a synthetic polynomial-regression benchmark.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, METHODS  # noqa: F401
from .datagen import DataShard, SettingSpec, generate_setting  # noqa: F401
from .unrolled_net import (  # noqa: F401
    CellState,
    LearnableParams,
    forward_cell,
    forward_network,
    init_params,
    init_state,
    phi1_dual,
    phi2_v_grad,
    phi2_v_linear,
    phi3_aux,
    phi4_global,
)
from .learner import backward, fd_gradient, init_optimizer, optimizer_step  # noqa: F401
from .baselines import run_baseline  # noqa: F401
from .federation import run_round, run_unrolled_experiment  # noqa: F401
from .diagnostics import check_descent, lagrangian, lambda_report, trace_from_tape  # noqa: F401
