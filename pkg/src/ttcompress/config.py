"""Run configuration: INI-style ``key = value`` files with ``[section]`` headers.

Example::

    [run]
    task = planted
    seed = 0

    [model]
    head = mse
    layers = fc

    [layer.fc]
    kind = tt
    in_modes = 4,4
    out_modes = 4,4
    ranks = 6

    [early]
    epochs = 30
    gamma = 3e-3

Layer kinds: ``tt`` (in_modes, out_modes, ranks, bias), ``ttm`` (row_modes,
col_modes, ranks), ``dense`` (in_features, out_features, bias), ``embedding``
(num_embeddings, embedding_dim), ``activation`` (name) and ``residual``
(inner, scale).
"""

from __future__ import annotations

import configparser
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .embedding import TTMEmbedding
from .linear import TTLinear
from .nn import Activation, Dense, Embedding, Model, Residual
from .tasks import click_data, gaussian_mixture, planted_regression

__all__ = ["ConfigError", "RunConfig", "build_data", "build_model", "load_config", "parse_config", "stream_seed"]

TASKS = {
    "planted": planted_regression,
    "mixture": gaussian_mixture,
    "clicks": click_data,
}


class ConfigError(ValueError):
    pass


def stream_seed(seed: int, name: str) -> int:
    """Seed of the named random stream; independent of other stream names."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass
class StageConfig:
    epochs: int = 0
    optimizer: str = "adam"
    lr: float = 1e-2
    batch_size: int | None = 64  # None means full batch
    beta: float = 0.0
    prox: bool = False
    gamma: float = 0.0
    rho: float = 1e-3
    w1: float | None = None
    w2: float | None = None
    w1_scale: float | None = None
    L0: float | None = None
    S0: float | None = None
    S0_ratio: float | None = None


@dataclass
class RunConfig:
    task: str
    seed: int = 0
    out: str = "run"
    task_args: dict = field(default_factory=dict)
    head: str = "mse"
    layers: list = field(default_factory=list)  # (name, dict) in model order
    early: StageConfig = field(default_factory=StageConfig)
    late: StageConfig = field(default_factory=StageConfig)
    epsilon: float = 1e-2
    prune_each_epoch: bool = False


# ---------------------------------------------------------------------------
# parsing helpers


def _where(section, key):
    return f"[{section}] {key}"


def _get(cp, section, key, conv, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"{_where(section, key)}: missing required field")
        return default
    raw = cp.get(section, key).strip()
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(section, key)}: bad value {raw!r} ({exc})") from None


def _ints(raw: str) -> tuple[int, ...]:
    vals = tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if not vals or min(vals) < 1:
        raise ValueError("expected a comma list of positive integers")
    return vals


def _ranks(raw: str):
    vals = tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if not vals or min(vals) < 0:
        raise ValueError("expected a non-negative rank or rank chain")
    return vals[0] if len(vals) == 1 else vals


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _opt_float(raw: str):
    return None if raw.lower() in ("", "auto", "none") else float(raw)


def _batch(raw: str):
    if raw.lower() == "full":
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("batch size must be positive")
    return n


def _number(raw: str):
    try:
        return int(raw)
    except ValueError:
        return float(raw)


LAYER_FIELDS = {
    "tt": {"in_modes": _ints, "out_modes": _ints, "ranks": _ranks, "bias": _bool},
    "ttm": {"row_modes": _ints, "col_modes": _ints, "ranks": _ranks, "split": int},
    "dense": {"in_features": int, "out_features": int, "bias": _bool},
    "embedding": {"num_embeddings": int, "embedding_dim": int},
    "activation": {"name": str},
    "residual": {"inner": str, "scale": float},
}
REQUIRED = {
    "tt": ("in_modes", "out_modes", "ranks"),
    "ttm": ("row_modes", "col_modes", "ranks"),
    "dense": ("in_features", "out_features"),
    "embedding": ("num_embeddings", "embedding_dim"),
    "activation": ("name",),
    "residual": ("inner",),
}


def _layer(cp, name):
    section = f"layer.{name}"
    if not cp.has_section(section):
        raise ConfigError(f"[model] layers: no section [{section}]")
    kind = _get(cp, section, "kind", str, required=True)
    if kind not in LAYER_FIELDS:
        raise ConfigError(f"{_where(section, 'kind')}: unknown layer kind {kind!r}")
    spec = {"kind": kind}
    for key in cp.options(section):
        if key == "kind":
            continue
        if key not in LAYER_FIELDS[kind]:
            raise ConfigError(f"{_where(section, key)}: unknown field for a {kind} layer")
        spec[key] = _get(cp, section, key, LAYER_FIELDS[kind][key])
    for key in REQUIRED[kind]:
        if key not in spec:
            raise ConfigError(f"{_where(section, key)}: missing required field")
    if kind in ("tt", "ttm"):
        a, b = ("in_modes", "out_modes") if kind == "tt" else ("row_modes", "col_modes")
        r = spec["ranks"]
        d = len(spec[a]) + (len(spec[b]) if kind == "tt" else 0)
        if kind == "ttm" and len(spec[a]) != len(spec[b]):
            raise ConfigError(f"[{section}]: row_modes and col_modes differ in length")
        if not isinstance(r, int) and (len(r) != d + 1 or r[0] != 1 or r[-1] != 1):
            raise ConfigError(f"{_where(section, 'ranks')}: rank chain must have {d + 1} entries with 1 at both ends")
    if kind == "activation" and spec["name"] not in ("gelu", "relu", "identity"):
        raise ConfigError(f"{_where(section, 'name')}: unknown activation {spec['name']!r}")
    return spec


def _stage(cp, section, defaults: StageConfig) -> StageConfig:
    if not cp.has_section(section):
        return defaults
    conv = {
        "epochs": int, "optimizer": str, "lr": float, "batch_size": _batch, "beta": float,
        "prox": _bool, "gamma": float, "rho": float, "w1": _opt_float, "w2": _opt_float,
        "w1_scale": _opt_float, "l0": _opt_float, "s0": _opt_float, "s0_ratio": _opt_float,
    }
    names = {"l0": "L0", "s0": "S0", "s0_ratio": "S0_ratio"}
    out = StageConfig(**vars(defaults))
    for key in cp.options(section):
        if key not in conv:
            raise ConfigError(f"{_where(section, key)}: unknown field")
        setattr(out, names.get(key, key), _get(cp, section, key, conv[key]))
    if out.epochs < 0:
        raise ConfigError(f"{_where(section, 'epochs')}: must be >= 0")
    if out.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"{_where(section, 'optimizer')}: expected adam or sgd")
    for key in ("lr", "beta", "gamma", "rho"):
        v = getattr(out, key)
        if not (math.isfinite(v) and v >= 0):
            raise ConfigError(f"{_where(section, key)}: must be finite and non-negative")
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    if not cp.has_section("run"):
        raise ConfigError("missing [run] section")
    task = _get(cp, "run", "task", str, required=True)
    if task not in TASKS:
        raise ConfigError(f"{_where('run', 'task')}: unknown task {task!r} (choose from {', '.join(TASKS)})")
    cfg = RunConfig(task=task,
                    seed=_get(cp, "run", "seed", int, 0),
                    out=_get(cp, "run", "out", str, "run"),
                    epsilon=_get(cp, "run", "epsilon", float, 1e-2),
                    prune_each_epoch=_get(cp, "run", "prune_each_epoch", _bool, False))
    if cfg.epsilon < 0:
        raise ConfigError(f"{_where('run', 'epsilon')}: must be >= 0")
    if cp.has_section("task"):
        cfg.task_args = {k: _get(cp, "task", k, _task_value) for k in cp.options("task")}
    if not cp.has_section("model"):
        raise ConfigError("missing [model] section")
    cfg.head = _get(cp, "model", "head", str, "mse")
    if cfg.head not in ("mse", "softmax_ce", "bce"):
        raise ConfigError(f"{_where('model', 'head')}: unknown head {cfg.head!r}")
    names = [n.strip() for n in _get(cp, "model", "layers", str, required=True).split(",") if n.strip()]
    cfg.layers = [(n, _layer(cp, n)) for n in names]
    cfg.early = _stage(cp, "early", StageConfig())
    cfg.late = _stage(cp, "late", StageConfig())
    _check_shapes(cfg)
    return cfg


def _task_value(raw: str):
    if "," in raw:
        return tuple(_number(v) for v in raw.split(",") if v.strip())
    return _number(raw)


def _features(spec):
    k = spec["kind"]
    if k == "tt":
        return math.prod(spec["in_modes"]), math.prod(spec["out_modes"])
    if k == "dense":
        return spec["in_features"], spec["out_features"]
    if k == "ttm":
        return None, math.prod(spec["col_modes"])
    if k == "embedding":
        return None, spec["embedding_dim"]
    return "same", "same"


def _check_shapes(cfg: RunConfig):
    specs = dict(cfg.layers)
    width = None
    for name, spec in cfg.layers:
        if spec["kind"] == "residual":
            inner = specs.get(spec["inner"]) if spec["inner"] in specs else None
            if inner is None:
                raise ConfigError(f"[layer.{name}] inner: {spec['inner']!r} is not listed in [model] layers")
            spec = inner
        n_in, n_out = _features(spec)
        if n_in == "same":
            continue
        if n_in is not None and width is not None and n_in != width:
            raise ConfigError(f"[layer.{name}]: expects {n_in} inputs but receives {width}")
        width = n_out


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


# ---------------------------------------------------------------------------
# construction


def _make_layer(spec, name, seed, specs):
    s = stream_seed(seed, f"layer:{name}")
    k = spec["kind"]
    if k == "tt":
        return TTLinear(spec["in_modes"], spec["out_modes"], spec["ranks"], bias=spec.get("bias", True), seed=s)
    if k == "ttm":
        return TTMEmbedding(spec["row_modes"], spec["col_modes"], spec["ranks"], seed=s, split=spec.get("split"))
    if k == "dense":
        return Dense(spec["in_features"], spec["out_features"], bias=spec.get("bias", True), seed=s)
    if k == "embedding":
        return Embedding(spec["num_embeddings"], spec["embedding_dim"], seed=s, init_std=0.1)
    if k == "activation":
        return Activation(spec["name"])
    inner = spec["inner"]
    return Residual(_make_layer(specs[inner], inner, seed, specs), spec.get("scale", 1.0))


def build_model(cfg: RunConfig) -> Model:
    specs = dict(cfg.layers)
    inner = {spec["inner"] for _, spec in cfg.layers if spec["kind"] == "residual"}
    layers = [_make_layer(spec, name, cfg.seed, specs) for name, spec in cfg.layers if name not in inner]
    return Model(layers, cfg.head)


def build_data(cfg: RunConfig):
    try:
        return TASKS[cfg.task](seed=stream_seed(cfg.seed, "data"), **cfg.task_args)
    except TypeError as exc:
        raise ConfigError(f"[task]: {exc}") from None
