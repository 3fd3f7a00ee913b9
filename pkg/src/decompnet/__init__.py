"""Rank-adjustable neural networks: joint full/low-rank training through a
truncated SVD, global rank selection under a budget, and error analysis."""
from .errors import (
    ConfigError,
    DecompNetError,
    DegenerateInputError,
    InvalidBudgetError,
    InvalidInputError,
    InvalidRankError,
    NumericalFailureError,
    ParseError,
    UnsupportedModelError,
)
from .linalg import ConvKernelShape, SvdFactors, dematricize, matricize, svd, svd_call_count, truncate
from .network import NetworkModel, conv, dense, forward_full, forward_lowrank, joint_loss_and_grads, mlp
from .ranks import Budget, RankAssignment, assign, count_params_macs, select_energy, select_sv, select_uniform
from .svdgrad import ClipConfig, clip_rho, lowrank_backward, lowrank_forward, rebalance_lambda
from .training import TrainConfig, TrainLog, evaluate, train

__version__ = "0.1.0"
