"""
Hitting a size target
=====================

After a short warm-up, the late stage is asked for half the current size.
At every step it descends whichever of the loss gap and the size gap is
larger, so the size settles near the target while accuracy holds.
"""

from collections import Counter

from ttcompress import (
    Activation, Dense, EarlyStageConfig, LateStageConfig, Model, OptimConfig, TTLinear,
    run_early_stage, run_late_stage,
)
from ttcompress.tasks import gaussian_mixture

eps = 5e-2
data = gaussian_mixture(seed=0)
model = Model([TTLinear((4, 4), (4, 4, 4), 4, seed=1), Activation("gelu"),
               TTLinear((4, 4, 4), (4, 4), 4, seed=2), Activation("gelu"), Dense(16, 4, seed=3)],
              "softmax_ce")

res = run_early_stage(model, data, 10, EarlyStageConfig(1e-5, 1e-3), OptimConfig("adam", 1e-2),
                      epsilon=eps, seed=0)
size1 = model.size_report(eps).exact_size
acc1 = model.metric(model.forward(data.x_test), data.y_test)
loss1 = res.trajectory[-1].loss
print(f"after warm-up: size {size1}, accuracy {acc1:.3f}")

###############################################################################
# Full-batch steps keep the branch test from flickering on batch noise.

cfg = LateStageConfig(L0=loss1, S0=0.5 * size1, w1=0.5 / loss1, rho=1e-4, beta=1e-3)
branches = Counter()
res = run_late_stage(model, data, 600, cfg, OptimConfig("adam", 5e-3), epsilon=eps, seed=0,
                     batch_size=len(data.y_train), on_step=lambda r: branches.update([r.branch]))
for ep in res.trajectory[::100]:
    print(f"epoch {ep.epoch:3d}  loss {ep.loss:.4f}  size {ep.s_eps}")

size2 = model.size_report(eps).exact_size
acc2 = model.metric(model.forward(data.x_test), data.y_test)
print(f"target {cfg.S0:.0f}, reached {size2} ({size2 / size1:.2f} of warm-up size)")
print(f"accuracy {acc1:.3f} -> {acc2:.3f}; steps per branch {dict(branches)}")
print("ranks:", [t.ranks for t in model.trains()])
