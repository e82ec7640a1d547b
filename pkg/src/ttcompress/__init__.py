"""Tensor-train compressed layers with rank-adaptive training, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .embedding import TTMEmbedding
from .linear import TTLinear
from .nn import Activation, Dense, Embedding, Model, Residual, densify
from .optim import SGD, Adam
from .paths import (
    empirical_tt_plan,
    exhaustive_search,
    greedy_search,
    parse_network_spec,
    tt_forward_network,
)
from .rank import (
    DivergenceError,
    EarlyStageConfig,
    LateStageConfig,
    OptimConfig,
    run_early_stage,
    run_late_stage,
)
from .tensor import count_flops, einsum
from .tt import TTMTensor, TTTensor, init_tt, init_ttm, param_count, prune, tt_reconstruct, tt_svd

__version__ = "0.1.0"
