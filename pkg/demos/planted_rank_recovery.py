"""
Recovering a planted TT rank
============================

Targets are generated by a rank-2 TT weight.  We fit a rank-6 TT layer with
the size penalty switched on and watch the bond diagonals collapse.
"""

from ttcompress import EarlyStageConfig, Model, OptimConfig, TTLinear, run_early_stage
from ttcompress.tasks import planted_regression

data = planted_regression(seed=0, rank=2, noise=0.3)
model = Model([TTLinear((4, 4), (4, 4), 6, seed=100)], "mse")
print("initial ranks", model.trains()[0].ranks)

###############################################################################
# Train with a small l1 weight on the diagonals.  Each epoch records the
# ranks that would survive a threshold of 1e-2.

res = run_early_stage(model, data, 30, EarlyStageConfig(gamma=3e-3, beta=1e-3),
                      OptimConfig("adam", 1e-2), epsilon=1e-2, seed=0)
for ep in res.trajectory[::5] + res.trajectory[-1:]:
    print(f"epoch {ep.epoch:2d}  loss {ep.loss:.4f}  size {ep.s_eps:4d}  ranks {ep.ranks[0]}")

###############################################################################
# Training ends with a prune.  Compare the test error to the generating
# weight's own error.

t = model.trains()[0]
mse = model.metric(model.forward(data.x_test), data.y_test)
print("pruned ranks", t.ranks, "removed channels per bond", res.removed)
print(f"test mse {mse:.4f}, generator {data.oracle['mse']:.4f}, ratio {mse / data.oracle['mse']:.3f}")
