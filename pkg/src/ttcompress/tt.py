"""Tensor-train (TT) and tensor-train-matrix (TTM) formats with rank controls.

A train is a list of cores ``G_1 .. G_d`` with shapes ``(r_{i-1}, *modes_i, r_i)``
plus one diagonal vector per interior bond.  The represented tensor is

    G_1 x D_1 x G_2 x D_2 x ... x D_{d-1} x G_d

so zeroing ``D_j[k]`` deletes rank channel ``k`` of bond ``j``.  TT cores carry
one mode (``n_i``), TTM cores carry a row and a column mode (``m_i, n_i``).
Ranks may reach zero after pruning; such a train represents the zero tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import as_tensor, einsum

__all__ = [
    "SizeReport",
    "TTMTensor",
    "TTTensor",
    "bond_l1_weights",
    "bond_thresholds",
    "fold_diags",
    "init_tt",
    "init_ttm",
    "param_count",
    "prune",
    "relaxed_size_grad",
    "tt_reconstruct",
    "tt_svd",
    "ttm_reconstruct",
    "ttm_svd",
    "ttm_to_matrix",
]


class _Train:
    """Shared core/diagonal bookkeeping for TT and TTM trains."""

    core_order: int = 3

    def __init__(self, cores: Sequence, diags: Sequence | None = None):
        self.cores = [as_tensor(c) for c in cores]
        if diags is None:
            diags = [np.ones(c.shape[-1]) for c in self.cores[:-1]]
        self.diags = [as_tensor(g).reshape(-1) for g in diags]
        self._validate()

    def _validate(self) -> None:
        if not self.cores:
            raise ValueError("a train needs at least one core")
        for i, c in enumerate(self.cores):
            if c.ndim != self.core_order:
                raise ValueError(
                    f"core {i} has order {c.ndim}, expected {self.core_order}"
                )
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        for j in range(len(self.cores) - 1):
            left, right = self.cores[j].shape[-1], self.cores[j + 1].shape[0]
            if left != right:
                raise ValueError(f"bond {j} mismatch: {left} vs {right}")
        if len(self.diags) != len(self.cores) - 1:
            raise ValueError(
                f"{len(self.cores)} cores need {len(self.cores) - 1} diagonals, "
                f"got {len(self.diags)}"
            )
        for j, g in enumerate(self.diags):
            if g.size != self.cores[j].shape[-1]:
                raise ValueError(
                    f"diagonal {j} has length {g.size}, bond rank is {self.cores[j].shape[-1]}"
                )

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[-1] for c in self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        """Elements per unit rank-pair of each core (``n_i`` or ``m_i n_i``)."""
        return tuple(math.prod(c.shape[1:-1]) for c in self.cores)

    @property
    def removable(self) -> bool:
        return any(r == 0 for r in self.ranks)

    def copy(self):
        return type(self)([c.copy() for c in self.cores], [g.copy() for g in self.diags])

    def folded_cores(self) -> list[np.ndarray]:
        """Cores with each diagonal multiplied into the right-hand core of its bond."""
        out = [self.cores[0]]
        for g, c in zip(self.diags, self.cores[1:]):
            out.append(g.reshape((-1,) + (1,) * (c.ndim - 1)) * c)
        return out

    def __repr__(self) -> str:
        return f"{type(self).__name__}(modes={self.modes}, ranks={self.ranks})"


class TTTensor(_Train):
    core_order = 3

    @property
    def modes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.modes


class TTMTensor(_Train):
    core_order = 4

    @property
    def row_modes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_modes(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores)

    @property
    def modes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.row_modes, self.col_modes

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return math.prod(self.row_modes), math.prod(self.col_modes)


def fold_diags(t: _Train) -> _Train:
    return type(t)(t.folded_cores())


# ---------------------------------------------------------------------------
# reconstruction


def _chain(cores: Sequence[np.ndarray]) -> np.ndarray:
    """Contract a chain of cores into an array of shape (1, *all modes, 1)."""
    acc = cores[0]
    for c in cores[1:]:
        lead = acc.shape[:-1]
        acc = einsum("xa,ay->xy", acc.reshape(math.prod(lead), acc.shape[-1]),
                     c.reshape(c.shape[0], math.prod(c.shape[1:])))
        acc = acc.reshape(lead + c.shape[1:])
    return acc


def tt_reconstruct(t: TTTensor, apply_diags: bool = True) -> np.ndarray:
    cores = t.folded_cores() if apply_diags else t.cores
    return _chain(cores).reshape(t.modes)


def ttm_reconstruct(t: TTMTensor, apply_diags: bool = True) -> np.ndarray:
    """Full order-2d tensor with modes ordered ``(m_1, n_1, ..., m_d, n_d)``."""
    cores = t.folded_cores() if apply_diags else t.cores
    full = _chain(cores)
    return full.reshape(full.shape[1:-1])


def ttm_to_matrix(t: TTMTensor, apply_diags: bool = True) -> np.ndarray:
    """Unfold to the ``(prod m, prod n)`` matrix with row-major mode grouping."""
    full = ttm_reconstruct(t, apply_diags)
    d = t.d
    perm = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return full.transpose(perm).reshape(t.matrix_shape)


# ---------------------------------------------------------------------------
# size accounting


@dataclass
class SizeReport:
    exact_size: int
    relaxed_size: float
    per_layer: list[tuple[int, float]] = field(default_factory=list)


def bond_thresholds(t: _Train, epsilon: float, relative: bool = False) -> list[float]:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if not relative:
        return [epsilon] * len(t.diags)
    return [epsilon * (float(np.max(np.abs(g))) if g.size else 0.0) for g in t.diags]


def _size_formula(mode_sizes: Sequence[int], bond_norms: Sequence[float]) -> float:
    f, k = mode_sizes, bond_norms
    d = len(f)
    if d == 1:
        return f[0]
    total = f[0] * k[0] + f[-1] * k[-1]
    for j in range(1, d - 1):
        total += f[j] * k[j - 1] * k[j]
    return total


def _single_count(t: _Train, epsilon: float, relative: bool) -> tuple[int, float]:
    thr = bond_thresholds(t, epsilon, relative)
    l0 = [int(np.count_nonzero(np.abs(g) > e)) for g, e in zip(t.diags, thr)]
    l1 = [float(np.abs(g).sum()) for g in t.diags]
    exact = 0 if 0 in l0 else int(_size_formula(t.mode_sizes, l0))
    return exact, float(_size_formula(t.mode_sizes, l1))


def param_count(t, epsilon: float = 0.0, relative: bool = False) -> SizeReport:
    """Compressed parameter count of one train or a list of trains.

    ``exact_size`` counts a diagonal entry as live when its magnitude exceeds
    the bond threshold; ``relaxed_size`` replaces those counts by l1 norms.
    With ``relative=True`` each bond's threshold is ``epsilon`` times the
    bond's largest magnitude.
    """
    trains = t if isinstance(t, (list, tuple)) else [t]
    per = [_single_count(x, epsilon, relative) for x in trains]
    return SizeReport(sum(p[0] for p in per), sum(p[1] for p in per), per)


def bond_l1_weights(t: _Train) -> list[float]:
    """Partial derivative of the relaxed size with respect to each ``||D_j||_1``."""
    f = t.mode_sizes
    k = [float(np.abs(g).sum()) for g in t.diags]
    d = t.d
    weights = []
    for j in range(d - 1):
        # bond j joins core j and core j+1
        w = f[0] if j == 0 else f[j] * k[j - 1]
        w += f[-1] if j == d - 2 else f[j + 1] * k[j + 1]
        weights.append(w)
    return weights


def relaxed_size_grad(t: _Train) -> list[np.ndarray]:
    """Subgradient of the relaxed size with respect to each diagonal.

    ``d|x|/dx`` is taken as ``sign(x)``, zero at zero.
    """
    return [w * np.sign(g) for w, g in zip(bond_l1_weights(t), t.diags)]


# ---------------------------------------------------------------------------
# pruning


def prune(t: _Train, epsilon: float = 0.0, relative: bool = False, fold: bool = True):
    """Delete rank channels whose diagonal magnitude is at most the threshold.

    Surviving diagonal values are folded into the right-hand core of each bond
    and the diagonals reset to ones; ``fold=False`` keeps them as diagonals
    instead.  A train left with an empty bond represents zero, so all its
    bonds are emptied.  Returns ``(pruned, removed_counts)``;
    ``pruned.removable`` is true when the ranks dropped to zero.
    """
    thr = bond_thresholds(t, epsilon, relative)
    keeps = [np.abs(g) > e for g, e in zip(t.diags, thr)]
    if any(not k.any() for k in keeps):
        # the train is the zero tensor; drop every channel
        keeps = [np.zeros_like(k) for k in keeps]
    cores = [c.copy() for c in t.cores]
    diags = []
    removed = []
    for j, (g, keep) in enumerate(zip(t.diags, keeps)):
        removed.append(int(np.count_nonzero(~keep)))
        cores[j] = cores[j][..., keep]
        right = cores[j + 1][keep]
        if fold:
            right = g[keep].reshape((-1,) + (1,) * (right.ndim - 1)) * right
        cores[j + 1] = right
        diags.append(g[keep].copy())
    return type(t)(cores, None if fold else diags), removed


# ---------------------------------------------------------------------------
# construction


def _rank_chain(d: int, ranks) -> tuple[int, ...]:
    if isinstance(ranks, (int, np.integer)):
        chain = (1,) + (int(ranks),) * (d - 1) + (1,)
    else:
        chain = tuple(int(r) for r in ranks)
    if len(chain) != d + 1:
        raise ValueError(f"rank chain {chain} has length {len(chain)}, need {d + 1}")
    if chain[0] != 1 or chain[-1] != 1:
        raise ValueError(f"rank chain {chain} must start and end with 1")
    if any(r < 1 for r in chain):
        raise ValueError(f"rank chain {chain} has non-positive entries")
    return chain


def _gaussian_cores(core_shapes, chain, target_var, rng):
    interior = math.prod(chain[1:-1])
    d = len(core_shapes)
    std = (target_var / interior) ** (0.5 / d)
    return [rng.normal(0.0, std, size=s) for s in core_shapes]


def init_tt(
    shape: Sequence[int],
    ranks,
    scheme: str = "scaled-gaussian",
    seed: int | np.random.Generator = 0,
    fan_in: int | None = None,
    dense=None,
) -> TTTensor:
    """Build a TT with the given mode sizes and rank chain.

    ``scaled-gaussian`` draws i.i.d. normal cores whose product has entry
    variance ``2 / fan_in`` (``fan_in`` defaults to the product of the first
    half of the modes).  ``tt-svd-from-dense`` factorizes ``dense`` instead.
    Diagonals start at one.
    """
    shape = tuple(int(n) for n in shape)
    d = len(shape)
    chain = _rank_chain(d, ranks)
    if scheme == "tt-svd-from-dense":
        if dense is None:
            raise ValueError("tt-svd-from-dense needs a dense tensor")
        return tt_svd(np.reshape(dense, shape), chain)
    if scheme != "scaled-gaussian":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    if fan_in is None:
        fan_in = math.prod(shape[: max(1, d // 2)])
    core_shapes = [(chain[i], shape[i], chain[i + 1]) for i in range(d)]
    return TTTensor(_gaussian_cores(core_shapes, chain, 2.0 / fan_in, rng))


def init_ttm(
    row_modes: Sequence[int],
    col_modes: Sequence[int],
    ranks,
    scheme: str = "scaled-gaussian",
    seed: int | np.random.Generator = 0,
    fan_in: int | None = None,
    dense=None,
) -> TTMTensor:
    row_modes, col_modes = tuple(row_modes), tuple(col_modes)
    if len(row_modes) != len(col_modes):
        raise ValueError("row and column mode lists must have equal length")
    d = len(row_modes)
    chain = _rank_chain(d, ranks)
    if scheme == "tt-svd-from-dense":
        if dense is None:
            raise ValueError("tt-svd-from-dense needs a dense matrix")
        return ttm_svd(np.asarray(dense), row_modes, col_modes, chain)
    if scheme != "scaled-gaussian":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    if fan_in is None:
        fan_in = math.prod(row_modes)
    core_shapes = [(chain[i], row_modes[i], col_modes[i], chain[i + 1]) for i in range(d)]
    return TTMTensor(_gaussian_cores(core_shapes, chain, 2.0 / fan_in, rng))


def tt_svd(dense, ranks=None) -> TTTensor:
    """Left-to-right TT-SVD; ``ranks`` caps each bond (``None`` keeps all)."""
    a = as_tensor(dense)
    shape = a.shape
    d = len(shape)
    caps = [None] * (d + 1) if ranks is None else list(_rank_chain(d, ranks))
    cores = []
    r_prev = 1
    rest = a.reshape(1, -1)
    for i in range(d - 1):
        mat = rest.reshape(r_prev * shape[i], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = len(s) if caps[i + 1] is None else min(len(s), caps[i + 1])
        cores.append(u[:, :r].reshape(r_prev, shape[i], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(rest.reshape(r_prev, shape[-1], 1))
    return TTTensor(cores)


def ttm_svd(matrix, row_modes, col_modes, ranks=None) -> TTMTensor:
    d = len(row_modes)
    full = as_tensor(matrix).reshape(tuple(row_modes) + tuple(col_modes))
    perm = [k for i in range(d) for k in (i, d + i)]
    paired = full.transpose(perm).reshape([m * n for m, n in zip(row_modes, col_modes)])
    tt = tt_svd(paired, ranks)
    cores = [
        c.reshape(c.shape[0], m, n, c.shape[-1])
        for c, m, n in zip(tt.cores, row_modes, col_modes)
    ]
    return TTMTensor(cores)
