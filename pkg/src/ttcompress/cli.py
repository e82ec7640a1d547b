"""Command-line front end.

    ttcompress train --config run.ini [--out DIR] [--seed N]
    ttcompress eval --checkpoint DIR/checkpoint.ttck --config run.ini
    ttcompress inspect-ranks (--checkpoint PATH | --config PATH)
    ttcompress plan-path network.txt [--batch B]
    ttcompress bench --config run.ini [--checkpoint PATH] [--batch B]

Exit codes: 0 success, 2 configuration or input error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_data, build_model, load_config, stream_seed
from .nn import densify
from .paths import (
    MAX_EXHAUSTIVE_NODES,
    PlanError,
    empirical_tt_plan,
    exhaustive_search,
    greedy_search,
    parse_network_spec,
)
from .rank import (
    DivergenceError,
    EarlyStageConfig,
    LateStageConfig,
    OptimConfig,
    RankTrainState,
    effective_ranks,
    run_early_stage,
    run_late_stage,
)
from .tensor import count_flops

__all__ = ["METRICS_COLUMNS", "main"]

METRICS_COLUMNS = ("step", "epoch", "stage", "branch", "train_loss", "eval_metric", "s_hat",
                   "s_eps", "total_params", "compression_ratio", "max_ranks")
CHECKPOINT_NAME = "checkpoint.ttck"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    """Rows of ``metrics.csv``; the eval column is filled on each epoch's last step."""

    def __init__(self, model, epsilon):
        self.model = model
        self.epsilon = epsilon
        self.rows = []

    def on_step(self, rec):
        total = rec.s_eps + self.model.dense_params()
        ratio = self.model.dense_equivalent_size() / max(total, 1)
        self.rows.append({
            "step": rec.step, "epoch": rec.epoch, "stage": rec.stage, "branch": rec.branch,
            "train_loss": float(rec.loss), "eval_metric": None, "s_hat": float(rec.s_hat),
            "s_eps": int(rec.s_eps), "total_params": int(total), "compression_ratio": float(ratio),
            "max_ranks": ";".join(str(max(r)) for r in rec.ranks),
        })

    def attach_evals(self, trajectory):
        last = {}
        for row in self.rows:
            last[(row["stage"], row["epoch"])] = row
        for ep in trajectory:
            row = last.get((ep.stage, ep.epoch))
            if row is not None and ep.eval_metric is not None:
                row["eval_metric"] = float(ep.eval_metric)

    def write(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _batch(size, data):
    return len(data.y_train) if size is None else size


def _late_config(cfg: RunConfig, model, data, L_prev):
    st = cfg.late
    L0 = st.L0
    if L0 is None:
        if L_prev is None:
            L_prev = float(model.loss(model.forward(data.x_train), data.y_train)[0])
        L0 = L_prev
    S0 = st.S0
    if S0 is None:
        ratio = 0.5 if st.S0_ratio is None else st.S0_ratio
        S0 = ratio * model.size_report(cfg.epsilon).exact_size
    w1 = st.w1
    if w1 is None and st.w1_scale is not None:
        w1 = st.w1_scale / max(abs(L0), 1e-12)
    try:
        return LateStageConfig(L0=L0, S0=S0, w1=w1, w2=st.w2, rho=st.rho, beta=st.beta, prox=st.prox)
    except ValueError as exc:
        raise ConfigError(f"[late]: {exc}") from None


def run_training(cfg: RunConfig, out_dir: str, stream=sys.stdout):
    """Train per ``cfg``, writing ``metrics.csv`` and the checkpoint into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    data = build_data(cfg)
    model = build_model(cfg)
    log = MetricsLog(model, cfg.epsilon)
    common = dict(epsilon=cfg.epsilon, on_step=log.on_step, prune_each_epoch=cfg.prune_each_epoch,
                  state=RankTrainState())
    optimizer, stage, L_prev, step = None, "init", None, 0
    try:
        if cfg.early.epochs > 0:
            st = cfg.early
            res = run_early_stage(model, data, st.epochs,
                                  EarlyStageConfig(gamma=st.gamma, beta=st.beta, prox=st.prox),
                                  OptimConfig(st.optimizer, st.lr), batch_size=_batch(st.batch_size, data),
                                  seed=stream_seed(cfg.seed, "early"), **common)
            log.attach_evals(res.trajectory)
            optimizer, stage, L_prev = res.optimizer, "early", res.trajectory[-1].loss
            print(f"early: {st.epochs} epochs, size {model.compressed_size(cfg.epsilon)}", file=stream)
        if cfg.late.epochs > 0:
            st = cfg.late
            late = _late_config(cfg, model, data, L_prev)
            print(f"late: target L0={late.L0:.6g} S0={late.S0:.6g}", file=stream)
            res = run_late_stage(model, data, st.epochs, late, OptimConfig(st.optimizer, st.lr),
                                 batch_size=_batch(st.batch_size, data),
                                 seed=stream_seed(cfg.seed, "late"), **common)
            log.attach_evals(res.trajectory)
            optimizer, stage = res.optimizer, "late"
            print(f"late: {st.epochs} epochs, size {model.compressed_size(cfg.epsilon)}", file=stream)
    finally:
        log.write(os.path.join(out_dir, "metrics.csv"))
    if log.rows:
        step = log.rows[-1]["step"]
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), model, optimizer,
                    seed=cfg.seed, step=step, stage=stage)
    return model, data, log


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load(args)
    out = args.out or cfg.out
    model, data, _ = run_training(cfg, out)
    metric = model.metric(model.forward(data.x_test), data.y_test)
    print(f"params {model.compressed_size(cfg.epsilon)} / dense {model.dense_equivalent_size()}"
          f"  ratio {model.compression_ratio(cfg.epsilon):.3f}  eval {metric:.6g}")
    print(f"wrote {os.path.join(out, 'metrics.csv')} and {os.path.join(out, CHECKPOINT_NAME)}")
    return EXIT_OK


def _checkpoint_path(args):
    path = args.checkpoint
    if not path:
        raise ConfigError("--checkpoint is required for this command")
    if os.path.isdir(path):
        path = os.path.join(path, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise ConfigError(f"{path}: no such file")
    return path


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_checkpoint_path(args))
    cfg = _load(args)
    if args.seed is None and ckpt.seed is not None:
        cfg.seed = ckpt.seed
    data = build_data(cfg)
    model = ckpt.model
    pred = model.forward(data.x_test)
    loss = model.loss(pred, data.y_test)[0]
    print(f"test loss      {loss:.6g}")
    if model.higher_is_better:
        print(f"test accuracy  {model.metric(pred, data.y_test):.6g}")
    print(f"params         {model.compressed_size(cfg.epsilon)}")
    print(f"dense params   {model.dense_equivalent_size()}")
    print(f"compression    {model.compression_ratio(cfg.epsilon):.3f}x")
    return EXIT_OK


def rank_table(model, epsilon: float = 0.0) -> str:
    rows = [("layer", "kind", "modes", "ranks", f"ranks@{epsilon:g}", "removable")]
    for i, layer in enumerate(model.tensor_layers()):
        for t in layer.trains():
            eff = effective_ranks(t, epsilon)
            rows.append((str(i), type(layer).__name__, "x".join(map(str, _modes(t))),
                         _chain(t.ranks), _chain(eff), str(min(eff[1:-1], default=1) == 0)))
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _modes(t):
    m = t.modes
    if isinstance(m[0], tuple):
        return [f"{a}.{b}" for a, b in zip(*m)]
    return m


def _chain(r):
    return "(" + ",".join(map(str, r)) + ")"


def cmd_inspect_ranks(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(_checkpoint_path(args)).model
        eps = args.epsilon if args.epsilon is not None else 0.0
    else:
        cfg = _load(args)
        model = build_model(cfg)
        eps = args.epsilon if args.epsilon is not None else cfg.epsilon
    print(rank_table(model, eps))
    return EXIT_OK


def tt_shape(spec):
    """``(dims, ranks, b, p)`` if ``spec`` is a TT forward network over X, G1..Gd, else None."""
    names = spec.names
    d = len(names) - 1
    if d < 1 or set(names) != {"X"} | {f"G{i}" for i in range(1, d + 1)}:
        return None
    subs = [spec.subscript(f"G{i}") for i in range(1, d + 1)]
    x = spec.subscript("X")
    bonds = []
    for a, b in zip(subs, subs[1:]):
        shared = set(a) & set(b)
        if len(shared) > 1:
            return None
        bonds.append(shared.pop() if shared else None)
    modes = []
    for i, s in enumerate(subs):
        own = [c for c in s if c not in bonds]
        if len(own) != 1:
            return None
        modes.append(own[0])
    p = len(x) - 1
    if p < 1 or x[1:] != "".join(modes[:p]) or spec.output != x[0] + "".join(modes[p:]):
        return None
    ranks = [1] + [spec.sizes[c] if c else 1 for c in bonds] + [1]
    return [spec.sizes[c] for c in modes], ranks, spec.sizes[x[0]], p


def cmd_plan_path(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = parse_network_spec(fh.read())
    except OSError as exc:
        raise ConfigError(f"{args.spec}: {exc.strerror}") from None
    except PlanError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    shape = tt_shape(spec)
    if args.batch is not None:
        batch_char = spec.subscript("X")[0] if shape else "b"
        if batch_char not in spec.sizes:
            raise ConfigError(f"--batch given but the network has no '{batch_char}' index")
        spec = spec.with_size(batch_char, args.batch)
        shape = tt_shape(spec)
    if len(spec.nodes) <= MAX_EXHAUSTIVE_NODES:
        plan, how = exhaustive_search(spec), "exhaustive"
    else:
        plan, how = greedy_search(spec), "greedy"
    print(f"{how} plan ({len(spec.nodes)} nodes)")
    print(plan.describe())
    if shape is not None:
        dims, ranks, b, p = shape
        emp = empirical_tt_plan(dims, ranks, b, "forward", p)
        print()
        print("empirical TT plan")
        print(emp.describe())
    return EXIT_OK


def _madds(model, x, y):
    with count_flops() as fwd:
        pred = model.forward(x)
    _, g = model.loss(pred, y)
    with count_flops() as bwd:
        model.backward(g)
    return fwd.total, bwd.total


def cmd_bench(args) -> int:
    cfg = _load(args)
    data = build_data(cfg)
    model = load_checkpoint(_checkpoint_path(args)).model if args.checkpoint else build_model(cfg)
    b = args.batch or 64
    rng = np.random.default_rng(stream_seed(cfg.seed, "bench"))
    sel = rng.choice(len(data.y_train), size=min(b, len(data.y_train)), replace=False)
    x, y = data.x_train[sel], data.y_train[sel]
    rows = [("model", "params", "forward", "backward", "total")]
    counts = {}
    for name, m in (("compressed", model), ("dense", densify(model))):
        f, bw = _madds(m, x, y)
        counts[name] = f + bw
        params = m.compressed_size(cfg.epsilon) if name == "compressed" else m.dense_equivalent_size()
        rows.append((name, str(params), str(f), str(bw), str(f + bw)))
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    print(f"multiply-adds at batch {len(sel)}")
    for r in rows:
        print("  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))))
    print(f"dense / compressed: {counts['dense'] / max(counts['compressed'], 1):.3f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-ranks": cmd_inspect_ranks,
    "plan-path": cmd_plan_path,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--checkpoint", help="checkpoint file or run directory")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--seed", type=int, help="seed (overrides [run] seed)")
    parser = argparse.ArgumentParser(prog="ttcompress", description="Rank-adaptive tensor-train compression.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run the configured training stages")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the configured task")
    p = sub.add_parser("inspect-ranks", parents=[common], help="print per-layer rank chains")
    p.add_argument("--epsilon", type=float, help="threshold for effective ranks")
    p = sub.add_parser("plan-path", parents=[common], help="plan a tensor network contraction")
    p.add_argument("spec", help="network spec file")
    p.add_argument("--batch", type=int, help="size of the batch index")
    p = sub.add_parser("bench", parents=[common], help="count multiply-adds, compressed vs dense")
    p.add_argument("--batch", type=int, help="batch size")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
