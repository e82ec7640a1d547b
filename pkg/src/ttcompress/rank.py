"""Rank-adaptive training: size-regularized early stage and target-seeking late stage.

Both stages treat the bond diagonals of every tensorized layer as the size
knobs.  The early stage minimizes ``L + gamma * S_hat + beta * ||G||^2``.  The
late stage compares the weighted loss gap against the weighted size gap at
every step and descends on whichever is larger, using the l1 size ``S_hat``
in the objective and the thresholded count ``S`` in the comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .optim import make_optimizer
from .tt import bond_l1_weights, param_count, relaxed_size_grad

__all__ = [
    "DivergenceError",
    "EarlyStageConfig",
    "LateStageConfig",
    "ObjectiveTerms",
    "RankTrainState",
    "StageResult",
    "StepRecord",
    "default_late_config",
    "early_objective",
    "effective_ranks",
    "late_objective",
    "late_step_select",
    "run_early_stage",
    "run_late_stage",
]


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


def _check_nonneg(**vals):
    for k, v in vals.items():
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"{k} must be finite and non-negative, got {v}")


@dataclass
class EarlyStageConfig:
    gamma: float = 0.0
    beta: float = 0.0
    prox: bool = False

    def __post_init__(self):
        _check_nonneg(gamma=self.gamma, beta=self.beta)


@dataclass
class LateStageConfig:
    L0: float
    S0: float
    w1: float | None = None
    w2: float | None = None
    rho: float = 1e-3
    beta: float = 0.0
    prox: bool = False

    def __post_init__(self):
        if self.w1 is None:
            self.w1 = 1.0 / max(abs(self.L0), 1.0)
        if self.w2 is None:
            self.w2 = 1.0 / max(self.S0, 1.0)
        for k in ("w1", "w2", "rho"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{k} must be positive, got {v}")
        _check_nonneg(beta=self.beta)


def default_late_config(L0, S0, **kw) -> LateStageConfig:
    return LateStageConfig(L0=L0, S0=S0, **kw)


@dataclass
class RankTrainState:
    stage: str = "early"
    step: int = 0
    branch: str | None = None
    epsilon: float = 0.0


@dataclass
class ObjectiveTerms:
    """Objective value and its gradient pieces.

    The loss gradient enters with factor ``loss_weight``; ``core_grads`` and
    ``diag_grads`` are extra terms, one list per train.  ``size_weight`` is the
    coefficient on ``S_hat`` (used by the proximal variant).
    """

    value: float
    loss_weight: float
    size_weight: float
    core_grads: list
    diag_grads: list


def _regularizer(trains, size_weight: float, beta: float, with_size_grad: bool = True):
    rep = param_count(trains)
    core_sq = sum(float(np.sum(c * c)) for t in trains for c in t.cores)
    core_grads = [[2.0 * beta * c for c in t.cores] for t in trains]
    if with_size_grad:
        diag_grads = [[size_weight * g for g in relaxed_size_grad(t)] for t in trains]
    else:
        diag_grads = [[np.zeros_like(g) for g in t.diags] for t in trains]
    return rep.relaxed_size, core_sq, core_grads, diag_grads


def early_objective(loss: float, trains, cfg: EarlyStageConfig) -> ObjectiveTerms:
    s_hat, core_sq, gc, gd = _regularizer(trains, cfg.gamma, cfg.beta, not cfg.prox)
    value = loss + cfg.gamma * s_hat + cfg.beta * core_sq
    return ObjectiveTerms(value, 1.0, cfg.gamma, gc, gd)


def late_step_select(loss: float, size_exact: float, cfg: LateStageConfig) -> str:
    return "loss" if cfg.w1 * (loss - cfg.L0) >= cfg.w2 * (size_exact - cfg.S0) else "size"


def late_objective(branch: str, loss: float, trains, cfg: LateStageConfig) -> ObjectiveTerms:
    if branch == "loss":
        lw, sw, const = cfg.w1 + cfg.rho, cfg.rho, -cfg.w1 * cfg.L0
    elif branch == "size":
        lw, sw, const = cfg.rho, cfg.w2 + cfg.rho, -cfg.w2 * cfg.S0
    else:
        raise ValueError(f"unknown branch {branch!r}")
    s_hat, core_sq, gc, gd = _regularizer(trains, sw, cfg.beta, not cfg.prox)
    value = lw * loss + sw * s_hat + cfg.beta * core_sq + const
    return ObjectiveTerms(value, lw, sw, gc, gd)


def effective_ranks(train, epsilon: float = 0.0) -> tuple[int, ...]:
    """Rank chain counting only diagonal entries above ``epsilon``."""
    inner = tuple(int(np.count_nonzero(np.abs(g) > epsilon)) for g in train.diags)
    return (1,) + inner + (1,)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class StepRecord:
    """One optimizer step; every field describes the parameters before the update."""

    step: int
    epoch: int
    stage: str
    branch: str
    loss: float
    s_hat: float
    s_eps: int
    ranks: list
    objective: float = float("nan")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    loss: float
    s_hat: float
    s_eps: int
    eval_metric: float | None
    ranks: list


@dataclass
class StageResult:
    model: object
    trajectory: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    optimizer: object = None
    removed: list | None = None


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-2


def _soft_threshold(trains, step, size_weight):
    """Proximal step for ``size_weight * S_hat`` with a scalar step size."""
    for t in trains:
        for w, g in zip(bond_l1_weights(t), t.diags):
            thr = step * size_weight * w
            g[...] = np.sign(g) * np.maximum(np.abs(g) - thr, 0.0)


def _run_stage(model, data, epochs, stage, objective_fn, prox, optim, epsilon,
               batch_size, seed, on_step, prune_each_epoch, prune_at_end, state):
    rng = np.random.default_rng(seed)
    optimizer = make_optimizer(optim.name, model.parameters(), optim.lr)
    result = StageResult(model)
    for epoch in range(epochs):
        total, count = 0.0, 0
        for xb, yb in data.batches(batch_size, rng):
            pred = model.forward(xb)
            loss, g = model.loss(pred, yb)
            if not math.isfinite(loss):
                raise DivergenceError(f"{stage} stage: loss became {loss} at step {state.step}")
            trains = model.trains()
            if on_step is not None:
                rep = param_count(trains, epsilon)
                ranks = [effective_ranks(t, epsilon) for t in trains]
            branch, terms = objective_fn(loss, trains)
            model.backward(g * terms.loss_weight)
            params = model.parameters()
            index = {id(p): i for i, p in enumerate(params)}
            grads = [np.array(x, copy=True) for x in model.gradients()]
            for t, gcs, gds in zip(trains, terms.core_grads, terms.diag_grads):
                for c, gc in zip(t.cores, gcs):
                    grads[index[id(c)]] += gc
                for dg, gd in zip(t.diags, gds):
                    grads[index[id(dg)]] += gd
            optimizer.step(grads)
            if prox and terms.size_weight > 0:
                _soft_threshold(trains, optimizer.lr, terms.size_weight)
            state.step += 1
            state.branch = branch
            total += loss * len(yb)
            count += len(yb)
            if on_step is not None:
                on_step(StepRecord(state.step, epoch, stage, branch, loss,
                                   rep.relaxed_size, rep.exact_size, ranks, terms.value))
        if prune_each_epoch:
            model.prune(epsilon, fold=False)
            optimizer = make_optimizer(optim.name, model.parameters(), optim.lr)
        trains = model.trains()
        rep = param_count(trains, epsilon)
        metric = None
        if getattr(data, "x_test", None) is not None:
            metric = model.metric(model.forward(data.x_test), data.y_test)
        result.trajectory.append(EpochRecord(epoch, stage, total / max(count, 1),
                                             rep.relaxed_size, rep.exact_size, metric,
                                             [effective_ranks(t, epsilon) for t in trains]))
    if prune_at_end:
        result.removed = model.prune(epsilon)
        optimizer = make_optimizer(optim.name, model.parameters(), optim.lr)
    result.optimizer = optimizer
    return result


def run_early_stage(model, data, epochs, cfg: EarlyStageConfig, optim=None, *,
                    epsilon=1e-2, batch_size=64, seed=0, on_step: Callable | None = None,
                    prune_each_epoch=False, prune_at_end=True, state=None) -> StageResult:
    """Mini-batch training on the linearly scalarized objective."""
    state = state or RankTrainState()
    state.stage, state.epsilon = "early", epsilon

    def objective(loss, trains):
        return "", early_objective(loss, trains, cfg)

    return _run_stage(model, data, epochs, "early", objective, cfg.prox, optim or OptimConfig(),
                      epsilon, batch_size, seed, on_step, prune_each_epoch, prune_at_end, state)


def run_late_stage(model, data, epochs, cfg: LateStageConfig, optim=None, *,
                   epsilon=1e-2, batch_size=64, seed=0, on_step: Callable | None = None,
                   prune_each_epoch=False, prune_at_end=True, state=None) -> StageResult:
    """Per-step branch choice between the loss gap and the size gap."""
    state = state or RankTrainState()
    state.stage, state.epsilon = "late", epsilon

    def objective(loss, trains):
        size = param_count(trains, epsilon).exact_size
        branch = late_step_select(loss, size, cfg)
        return branch, late_objective(branch, loss, trains, cfg)

    return _run_stage(model, data, epochs, "late", objective, cfg.prox, optim or OptimConfig(),
                      epsilon, batch_size, seed, on_step, prune_each_epoch, prune_at_end, state)
