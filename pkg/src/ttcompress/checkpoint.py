"""Binary checkpoints.

Layout: magic ``b"TTCK"``, u32 version, u32 record count, then records.  Each
record is prefixed by its u32 byte length and holds

    kind (u8) | name length + UTF-8 name | dims count + dims |
    rank count + ranks | payload count + (element count + f64 data)*

All integers are little-endian u32 and all floats little-endian f64.  Layer
records appear in model order; a residual record applies to the layer record
that follows it.  Dims conventions: a TT linear stores ``(p, n_1..n_{p+q})``
with ``p`` the number of input modes, a TTM embedding ``(split, m_1..m_d,
n_1..n_d)``, dense and embedding layers their matrix shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .embedding import TTMEmbedding
from .linear import TTLinear
from .nn import Activation, Dense, Embedding, Model, Residual
from .optim import SGD, Adam
from .tt import TTMTensor, TTTensor

__all__ = [
    "BadMagicError",
    "Checkpoint",
    "CheckpointError",
    "TruncatedError",
    "VersionError",
    "load_checkpoint",
    "save_checkpoint",
]

MAGIC = b"TTCK"
VERSION = 1

K_TT, K_TTM, K_DENSE, K_EMBED, K_ACT, K_RESIDUAL, K_HEAD, K_OPTIM, K_RNG, K_STATE = range(1, 11)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Record:
    kind: int
    name: str = ""
    dims: tuple = ()
    ranks: tuple = ()
    payloads: list = field(default_factory=list)


@dataclass
class Checkpoint:
    model: Model
    optimizer: object = None
    seed: int | None = None
    step: int = 0
    stage: str = ""


# ---------------------------------------------------------------------------
# record encoding


def _u32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def _encode(rec: Record) -> bytes:
    name = rec.name.encode("utf-8")
    parts = [struct.pack("<B", rec.kind), _u32(len(name)), name,
             _u32(len(rec.dims), *rec.dims), _u32(len(rec.ranks), *rec.ranks),
             _u32(len(rec.payloads))]
    for p in rec.payloads:
        arr = np.ascontiguousarray(p, dtype="<f8").reshape(-1)
        parts += [_u32(arr.size), arr.tobytes()]
    body = b"".join(parts)
    return _u32(len(body)) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32s(self, n: int):
        return struct.unpack(f"<{n}I", self.take(4 * n))

    def u32(self) -> int:
        return self.u32s(1)[0]


def _decode(body: bytes) -> Record:
    r = _Reader(body)
    kind = r.take(1)[0]
    name = r.take(r.u32()).decode("utf-8")
    dims = r.u32s(r.u32())
    ranks = r.u32s(r.u32())
    payloads = []
    for _ in range(r.u32()):
        n = r.u32()
        payloads.append(np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64))
    if r.pos != len(body):
        raise CheckpointError(f"record {name!r} has {len(body) - r.pos} trailing bytes")
    return Record(kind, name, tuple(dims), tuple(ranks), payloads)


# ---------------------------------------------------------------------------
# layers <-> records


def _train_payloads(t):
    return list(t.cores) + list(t.diags)


def _layer_records(layer, name):
    if isinstance(layer, Residual):
        return [Record(K_RESIDUAL, name, payloads=[np.array([layer.scale])])] + _layer_records(layer.inner, name)
    if isinstance(layer, TTLinear):
        t = layer.weight
        extra = [layer.bias] if layer.bias is not None else []
        return [Record(K_TT, name, (layer.p,) + t.modes, t.ranks, _train_payloads(t) + extra)]
    if isinstance(layer, TTMEmbedding):
        t = layer.table
        return [Record(K_TTM, name, (layer.split,) + t.row_modes + t.col_modes, t.ranks, _train_payloads(t))]
    if isinstance(layer, Dense):
        extra = [layer.bias] if layer.bias is not None else []
        return [Record(K_DENSE, name, layer.weight.shape, (), [layer.weight] + extra)]
    if isinstance(layer, Embedding):
        return [Record(K_EMBED, name, layer.weight.shape, (), [layer.weight])]
    if isinstance(layer, Activation):
        return [Record(K_ACT, layer.name)]
    raise CheckpointError(f"cannot serialize layer {type(layer).__name__}")


def _train_from(cls, core_shapes, ranks, payloads):
    d = len(core_shapes)
    if len(payloads) < 2 * d - 1:
        raise CheckpointError("too few payloads for a train")
    cores = [p.reshape(s) for p, s in zip(payloads[:d], core_shapes)]
    diags = [p.copy() for p in payloads[d:2 * d - 1]]
    return cls(cores, diags), payloads[2 * d - 1:]


def _layer_from(rec: Record):
    if rec.kind == K_TT:
        p, modes = rec.dims[0], rec.dims[1:]
        shapes = [(rec.ranks[i], n, rec.ranks[i + 1]) for i, n in enumerate(modes)]
        t, rest = _train_from(TTTensor, shapes, rec.ranks, rec.payloads)
        layer = TTLinear(modes[:p], modes[p:], rec.ranks, bias=bool(rest), weight=t)
        if rest:
            layer.bias = rest[0].copy()
        return layer
    if rec.kind == K_TTM:
        split, rest_dims = rec.dims[0], rec.dims[1:]
        d = len(rest_dims) // 2
        rows, cols = rest_dims[:d], rest_dims[d:]
        shapes = [(rec.ranks[i], rows[i], cols[i], rec.ranks[i + 1]) for i in range(d)]
        t, _ = _train_from(TTMTensor, shapes, rec.ranks, rec.payloads)
        return TTMEmbedding(rows, cols, rec.ranks, table=t, split=split)
    if rec.kind == K_DENSE:
        layer = Dense(*rec.dims, bias=len(rec.payloads) > 1)
        layer.weight = rec.payloads[0].reshape(rec.dims)
        if layer.bias is not None:
            layer.bias = rec.payloads[1].copy()
        return layer
    if rec.kind == K_EMBED:
        layer = Embedding(*rec.dims)
        layer.weight = rec.payloads[0].reshape(rec.dims)
        return layer
    if rec.kind == K_ACT:
        return Activation(rec.name)
    raise CheckpointError(f"unknown layer kind {rec.kind}")


# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, optimizer=None, seed: int | None = None,
                    step: int = 0, stage: str = "") -> None:
    records = [Record(K_HEAD, model.head)]
    for i, layer in enumerate(model.layers):
        records += _layer_records(layer, f"layer{i}")
    if optimizer is not None:
        hyper = np.array(optimizer.hyper(), dtype=float)
        moments = [a for group in optimizer.state_arrays() for a in group]
        records.append(Record(K_OPTIM, optimizer.name, (len(optimizer.params),), (), [hyper] + moments))
    if seed is not None:
        records.append(Record(K_RNG, "seed", (int(seed) & 0xFFFFFFFF,)))
    records.append(Record(K_STATE, stage, (int(step),)))
    blob = MAGIC + _u32(VERSION, len(records)) + b"".join(_encode(r) for r in records)
    with open(path, "wb") as fh:
        fh.write(blob)


def _restore_optimizer(rec: Record, model: Model):
    params = model.parameters()
    n = rec.dims[0]
    if n != len(params):
        raise CheckpointError(f"optimizer covers {n} parameters, model has {len(params)}")
    hyper, moments = rec.payloads[0], rec.payloads[1:]
    groups = [moments[i * n:(i + 1) * n] for i in range(len(moments) // max(n, 1))] if n else []
    if rec.name == "adam":
        opt = Adam(params, lr=hyper[1], betas=(hyper[2], hyper[3]), eps=hyper[4])
        if groups:
            opt.m = [g.reshape(p.shape) for g, p in zip(groups[0], params)]
            opt.v = [g.reshape(p.shape) for g, p in zip(groups[1], params)]
    elif rec.name == "sgd":
        opt = SGD(params, lr=hyper[1], momentum=hyper[2])
        if groups:
            opt.buf = [g.reshape(p.shape) for g, p in zip(groups[0], params)]
    else:
        raise CheckpointError(f"unknown optimizer {rec.name!r}")
    opt.t = int(hyper[0])
    return opt


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    r.take(4)
    version, count = r.u32s(2)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    records = [_decode(r.take(r.u32())) for _ in range(count)]
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")

    head, layers, ckpt_kw, opt_rec = "mse", [], {}, None
    residual = None
    for rec in records:
        if rec.kind == K_HEAD:
            head = rec.name
        elif rec.kind == K_RESIDUAL:
            residual = float(rec.payloads[0][0])
        elif rec.kind == K_OPTIM:
            opt_rec = rec
        elif rec.kind == K_RNG:
            ckpt_kw["seed"] = rec.dims[0]
        elif rec.kind == K_STATE:
            ckpt_kw["step"], ckpt_kw["stage"] = rec.dims[0], rec.name
        else:
            layer = _layer_from(rec)
            if residual is not None:
                layer, residual = Residual(layer, residual), None
            layers.append(layer)
    model = Model(layers, head)
    opt = _restore_optimizer(opt_rec, model) if opt_rec is not None else None
    return Checkpoint(model, opt, **ckpt_kw)
