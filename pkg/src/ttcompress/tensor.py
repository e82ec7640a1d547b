"""Dense tensors and a pairwise einsum engine with multiply-add accounting.

Dense tensors are plain ``float64`` numpy arrays in row-major order.  All
contractions in the package route through :func:`einsum`, which evaluates
operands strictly left to right, one pair at a time, so the cost of any
expression is the sum of its pairwise step costs.  Wrap code in
:func:`count_flops` to measure that cost.
"""

from __future__ import annotations

import contextlib
import math
import string
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "EinsumError",
    "EinsumExpr",
    "FlopCounter",
    "as_tensor",
    "contract_pair",
    "count_flops",
    "einsum",
    "frobenius_norm_sq",
    "mixed_radix_decode",
    "mixed_radix_encode",
    "parse_einsum",
    "reshape",
]

LETTERS = string.ascii_letters


class EinsumError(ValueError):
    """Malformed subscripts or operands that do not match them."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class EinsumExpr:
    inputs: tuple[str, ...]
    output: str

    def __str__(self) -> str:
        return ",".join(self.inputs) + "->" + self.output


def parse_einsum(subscripts: str | EinsumExpr) -> EinsumExpr:
    if isinstance(subscripts, EinsumExpr):
        expr = subscripts
    else:
        text = subscripts.replace(" ", "")
        if "->" not in text:
            raise EinsumError(f"explicit output required: {subscripts!r}")
        lhs, out = text.split("->")
        expr = EinsumExpr(tuple(lhs.split(",")), out)
    seen = set()
    for sub in expr.inputs + (expr.output,):
        for ch in sub:
            if ch not in LETTERS:
                raise EinsumError(f"invalid subscript character {ch!r}")
        if len(set(sub)) != len(sub):
            raise EinsumError(f"repeated character within subscript {sub!r}")
    for sub in expr.inputs:
        seen.update(sub)
    for ch in expr.output:
        if ch not in seen:
            raise EinsumError(f"output character {ch!r} does not appear in any input")
    return expr


def _sizes(expr: EinsumExpr, operands: Sequence[np.ndarray]) -> dict[str, int]:
    if len(expr.inputs) != len(operands):
        raise EinsumError(
            f"{len(expr.inputs)} subscripts given for {len(operands)} operands"
        )
    sizes: dict[str, int] = {}
    for sub, op in zip(expr.inputs, operands):
        if len(sub) != op.ndim:
            raise EinsumError(
                f"subscript {sub!r} has {len(sub)} characters but operand has order {op.ndim}"
            )
        for ch, n in zip(sub, op.shape):
            if sizes.setdefault(ch, n) != n:
                raise EinsumError(
                    f"dimension mismatch for character {ch!r}: {sizes[ch]} vs {n}"
                )
    return sizes


# ---------------------------------------------------------------------------
# multiply-add accounting


@dataclass
class FlopCounter:
    """Accumulates the multiply-add count of every pairwise step."""

    total: int = 0
    steps: list[tuple[str, int]] = field(default_factory=list)

    def add(self, label: str, cost: int) -> None:
        self.total += cost
        self.steps.append((label, cost))


_active_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record(label: str, cost: int) -> None:
    for c in _active_counters:
        c.add(label, cost)


# ---------------------------------------------------------------------------
# evaluation


def _pairwise(a: np.ndarray, sa: str, b: np.ndarray, sb: str, out: str) -> np.ndarray:
    """Contract two operands with a batched matmul.

    Characters are classified as batch (in both, kept), contracted (in both,
    dropped), or free on one side.  Free characters absent from ``out`` are
    summed away first.
    """
    drop_a = [ch for ch in sa if ch not in sb and ch not in out]
    if drop_a:
        keep = "".join(ch for ch in sa if ch not in drop_a)
        a = a.sum(axis=tuple(sa.index(ch) for ch in drop_a))
        sa = keep
    drop_b = [ch for ch in sb if ch not in sa and ch not in out]
    if drop_b:
        keep = "".join(ch for ch in sb if ch not in drop_b)
        b = b.sum(axis=tuple(sb.index(ch) for ch in drop_b))
        sb = keep

    batch = [ch for ch in sa if ch in sb and ch in out]
    contr = [ch for ch in sa if ch in sb and ch not in out]
    left = [ch for ch in sa if ch not in sb]
    right = [ch for ch in sb if ch not in sa]

    dim = {}
    dim.update(zip(sa, a.shape))
    dim.update(zip(sb, b.shape))

    def prod(chars):
        return math.prod(dim[ch] for ch in chars)

    at = a.transpose([sa.index(ch) for ch in batch + left + contr])
    bt = b.transpose([sb.index(ch) for ch in batch + contr + right])
    at = at.reshape(prod(batch), prod(left), prod(contr))
    bt = bt.reshape(prod(batch), prod(contr), prod(right))
    res = np.matmul(at, bt)
    order = batch + left + right
    res = res.reshape([dim[ch] for ch in order])
    return res.transpose([order.index(ch) for ch in out])


def einsum(subscripts: str | EinsumExpr, *operands) -> np.ndarray:
    """Evaluate an einsum expression pairwise, left to right.

    >>> einsum("ik,kj->ij", [[1, 2], [3, 4]], [[5, 6], [7, 8]])
    array([[19., 22.],
           [43., 50.]])
    """
    expr = parse_einsum(subscripts)
    ops = [as_tensor(op) for op in operands]
    sizes = _sizes(expr, ops)
    out = expr.output

    acc, sacc = ops[0], expr.inputs[0]
    if len(ops) == 1:
        drop = [ch for ch in sacc if ch not in out]
        if drop:
            acc = acc.sum(axis=tuple(sacc.index(ch) for ch in drop))
            sacc = "".join(ch for ch in sacc if ch not in drop)
        return np.require(acc.transpose([sacc.index(ch) for ch in out]), requirements="C")

    for k in range(1, len(ops)):
        sb = expr.inputs[k]
        later = set(out).union(*expr.inputs[k + 1:])
        if k == len(ops) - 1:
            sres = out
        else:
            sres = "".join(ch for ch in sacc if ch in later)
            sres += "".join(ch for ch in sb if ch in later and ch not in sres)
        union = set(sacc) | set(sb)
        _record(f"{sacc},{sb}->{sres}", math.prod(sizes[ch] for ch in union))
        acc = _pairwise(acc, sacc, ops[k], sb, sres)
        sacc = sres
    return np.require(acc, requirements="C")


def contract_pair(a, b, axes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Contract ``a`` and ``b`` over the paired axes.

    The result carries the free axes of ``a`` followed by those of ``b``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim + b.ndim > len(LETTERS):
        raise EinsumError("too many axes for the subscript alphabet")
    sa = list(LETTERS[: a.ndim])
    sb = list(LETTERS[a.ndim: a.ndim + b.ndim])
    used_a, used_b = set(), set()
    for ia, ib in axes:
        if not (0 <= ia < a.ndim):
            raise EinsumError(f"axis {ia} out of range for operand of order {a.ndim}")
        if not (0 <= ib < b.ndim):
            raise EinsumError(f"axis {ib} out of range for operand of order {b.ndim}")
        if ia in used_a or ib in used_b:
            raise EinsumError("an axis appears in more than one pair")
        if a.shape[ia] != b.shape[ib]:
            raise EinsumError(
                f"size mismatch: axis {ia} has {a.shape[ia]}, axis {ib} has {b.shape[ib]}"
            )
        used_a.add(ia)
        used_b.add(ib)
        sb[ib] = sa[ia]
    out = [sa[i] for i in range(a.ndim) if i not in used_a]
    out += [sb[i] for i in range(b.ndim) if i not in used_b]
    return einsum("".join(sa) + "," + "".join(sb) + "->" + "".join(out), a, b)


def reshape(t, new_shape: Sequence[int]) -> np.ndarray:
    t = as_tensor(t)
    new_shape = tuple(int(n) for n in new_shape)
    if math.prod(new_shape) != t.size:
        raise ValueError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.require(t, requirements="C").reshape(new_shape)


def mixed_radix_decode(flat_index, dims: Sequence[int]):
    """Row-major (big-endian) digits of ``flat_index`` in the radix ``dims``.

    Accepts a scalar (returns a tuple of ints) or an integer array (returns a
    tuple of arrays).
    """
    idx = np.asarray(flat_index)
    total = math.prod(dims)
    if np.any(idx < 0) or np.any(idx >= total):
        raise IndexError(f"flat index out of range for dims {tuple(dims)}")
    digits = np.unravel_index(idx, tuple(dims))
    if idx.ndim == 0:
        return tuple(int(z) for z in digits)
    return digits


def mixed_radix_encode(multi_index, dims: Sequence[int]):
    for z, n in zip(multi_index, dims):
        if np.any(np.asarray(z) < 0) or np.any(np.asarray(z) >= n):
            raise IndexError(f"digit out of range for dims {tuple(dims)}")
    flat = np.ravel_multi_index(tuple(np.asarray(z) for z in multi_index), tuple(dims))
    return int(flat) if np.ndim(flat) == 0 else flat


def frobenius_norm_sq(t) -> float:
    t = as_tensor(t)
    return float(np.dot(t.ravel(), t.ravel()))
