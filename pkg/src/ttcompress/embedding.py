"""TTM-compressed embedding table with deduplicated lookup.

The table ``T`` (``V x E``) is a TTM over row modes ``m_1..m_d`` and column
modes ``n_1..n_d``.  Cores ``1..g`` form the left group and ``g+1..d`` the right
group.  A lookup

1. keeps only the unique row ids of the batch (first-occurrence order),
2. splits each unique id into a (left, right) coordinate over
   ``(m_1..m_g, m_{g+1}..m_d)`` and keeps only the unique coordinates per side,
3. contracts the left group at the unique left coordinates and the right group
   at the unique right coordinates,
4. joins them over the middle rank to form the unique rows, then scatters the
   rows back to batch positions.

The "naive" path skips both dedup levels and is kept for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linear import _unfold_grads
from .tensor import as_tensor, einsum, mixed_radix_decode
from .tt import TTMTensor, init_ttm

__all__ = ["LookupPlan", "TTMEmbedding", "balanced_split", "build_plan"]


def _first_unique(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique values in first-occurrence order and the inverse map."""
    _, first, inv = np.unique(values, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return values[first[order]], rank[inv.reshape(-1)]


@dataclass
class LookupPlan:
    unique_rows: np.ndarray
    inverse_map: np.ndarray
    j1: np.ndarray
    j2: np.ndarray
    left_pairs: np.ndarray
    left_inverse: np.ndarray
    right_pairs: np.ndarray
    right_inverse: np.ndarray


def build_plan(indices, row_modes: Sequence[int], split: int) -> LookupPlan:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    vocab = math.prod(row_modes)
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"row id out of range for vocabulary of {vocab}")
    m1 = math.prod(row_modes[:split])
    m2 = math.prod(row_modes[split:])
    unique_rows, inverse = _first_unique(idx)
    if unique_rows.size:
        j1, j2 = mixed_radix_decode(unique_rows, (m1, m2))
    else:
        j1 = j2 = np.zeros(0, dtype=np.int64)
    left, left_inv = _first_unique(np.asarray(j1))
    right, right_inv = _first_unique(np.asarray(j2))
    return LookupPlan(unique_rows, inverse, np.asarray(j1), np.asarray(j2),
                      left, left_inv, right, right_inv)


def balanced_split(table: TTMTensor) -> int:
    """Split point minimizing the larger of the two full group tensors."""
    r = table.ranks
    d = table.d
    best, best_cost = 1, None
    for g in range(1, d):
        left = math.prod(table.mode_sizes[:g]) * r[g]
        right = r[g] * math.prod(table.mode_sizes[g:])
        cost = max(left, right)
        if best_cost is None or cost < best_cost:
            best, best_cost = g, cost
    return best


# ---------------------------------------------------------------------------
# gathered chains


def _left_chain(slices):
    """Contract gathered cores ``(r_{t-1}, u, n_t, r_t)`` of the left group.

    Returns the per-step accumulators ``(u, n_1..n_t, r_t)``; the last one is
    the group result.
    """
    acc = slices[0][0]  # (u, n, r), boundary rank is 1
    accs = [acc]
    for s in slices[1:]:
        u = acc.shape[0]
        nxt = einsum("uNa,aunb->uNnb", acc, s)
        acc = nxt.reshape(u, nxt.shape[1] * nxt.shape[2], s.shape[-1])
        accs.append(acc)
    return accs


def _left_chain_backward(slices, accs, g_out):
    g_slices = [None] * len(slices)
    g = g_out
    for t in range(len(slices) - 1, 0, -1):
        s = slices[t]
        prev = accs[t - 1]
        u, N, a = prev.shape
        gr = g.reshape(u, N, s.shape[2], s.shape[3])
        g_slices[t] = einsum("uNa,uNnb->aunb", prev, gr)
        g = einsum("uNnb,aunb->uNa", gr, s)
    g_slices[0] = g[None]
    return g_slices


def _right_chain(slices):
    """Contract gathered cores of the right group from the right end.

    Accumulators have shape ``(r_{t-1}, u, n_t..n_d)``.
    """
    acc = slices[-1][..., 0]  # (r, u, n)
    accs = [acc]
    for s in reversed(slices[:-1]):
        u = acc.shape[1]
        nxt = einsum("aunb,buN->aunN", s, acc)
        acc = nxt.reshape(s.shape[0], u, nxt.shape[2] * nxt.shape[3])
        accs.append(acc)
    accs.reverse()
    return accs


def _right_chain_backward(slices, accs, g_out):
    g_slices = [None] * len(slices)
    g = g_out
    for t in range(len(slices) - 1):
        s = slices[t]
        nxt = accs[t + 1]
        a, u, _ = g.shape
        gr = g.reshape(a, u, s.shape[2], g.shape[2] // s.shape[2])
        g_slices[t] = einsum("aunN,buN->aunb", gr, nxt)
        g = einsum("aunN,aunb->buN", gr, s)
    g_slices[-1] = g[..., None]
    return g_slices


def _gather(cores, digits):
    """Slices ``G_t[:, z_t, :, :]`` for the given per-core row digits."""
    return [c[:, z] for c, z in zip(cores, digits)]


def _scatter(core_shape, digits, g_slice):
    """Adjoint of :func:`_gather` for one core."""
    g = np.zeros(core_shape)
    np.add.at(g, (slice(None), digits), g_slice)
    return g


# ---------------------------------------------------------------------------


class TTMEmbedding:
    """Embedding lookup ``ids -> T[ids, :]`` on a TTM-factorized table."""

    kind = "ttm"

    def __init__(
        self,
        row_modes: Sequence[int],
        col_modes: Sequence[int],
        ranks,
        seed=0,
        table: TTMTensor | None = None,
        split: int | None = None,
        init_std: float | None = None,
    ):
        if table is None:
            fan_in = None
            if init_std is not None:
                fan_in = 2.0 / init_std ** 2
            table = init_ttm(row_modes, col_modes, ranks, seed=seed,
                             fan_in=fan_in if fan_in is not None else math.prod(col_modes))
        self.table = table
        if table.d < 2:
            raise ValueError("a TTM embedding needs at least two cores")
        self.split = balanced_split(table) if split is None else int(split)
        if not 1 <= self.split < table.d:
            raise ValueError(f"split must lie in [1, {table.d - 1}]")
        self.grads = None
        self.nonce = 0
        self._cache = None
        self._groups = None

    @property
    def row_modes(self):
        return self.table.row_modes

    @property
    def col_modes(self):
        return self.table.col_modes

    @property
    def num_embeddings(self) -> int:
        return math.prod(self.row_modes)

    @property
    def embedding_dim(self) -> int:
        return math.prod(self.col_modes)

    @property
    def ranks(self):
        return self.table.ranks

    def parameters(self):
        return list(self.table.cores) + list(self.table.diags)

    def gradients(self):
        return list(self.grads[0]) + list(self.grads[1])

    def trains(self):
        return [self.table]

    def _digits(self, rows: np.ndarray, side: str):
        g = self.split
        modes = self.row_modes[:g] if side == "left" else self.row_modes[g:]
        if rows.size == 0:
            return [np.zeros(0, dtype=np.int64) for _ in modes]
        return [np.asarray(z) for z in mixed_radix_decode(rows, modes)]

    def _groups_at(self, folded, left_rows, right_rows):
        g = self.split
        ld = self._digits(left_rows, "left")
        rd = self._digits(right_rows, "right")
        ls = _gather(folded[:g], ld)
        rs = _gather(folded[g:], rd)
        return ls, rs, ld, rd, _left_chain(ls), _right_chain(rs)

    def precompute_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Full group tensors ``A1 (M1, N1, r_g)`` and ``A2 (r_g, M2, N2)``."""
        g = self.split
        folded = self.table.folded_cores()
        m1 = math.prod(self.row_modes[:g])
        m2 = math.prod(self.row_modes[g:])
        *_, la, ra = self._groups_at(folded, np.arange(m1), np.arange(m2))
        self._groups = (la[-1], ra[0])
        return self._groups

    def build_plan(self, indices) -> LookupPlan:
        return build_plan(indices, self.row_modes, self.split)

    def lookup(self, indices) -> np.ndarray:
        plan = self.build_plan(indices)
        folded = self.table.folded_cores()
        ls, rs, ld, rd, la, ra = self._groups_at(folded, plan.left_pairs, plan.right_pairs)
        a1 = la[-1][plan.left_inverse]        # (u, N1, r)
        a2 = ra[0][:, plan.right_inverse]     # (r, u, N2)
        rows = einsum("unr,rum->unm", a1, a2).reshape(a1.shape[0], self.embedding_dim)
        out = rows[plan.inverse_map]
        self.nonce += 1
        self._cache = (self.nonce, plan, ls, rs, ld, rd, la, ra, a1, a2)
        return out

    forward = lookup

    def lookup_naive(self, indices) -> np.ndarray:
        """Same result without any dedup: one chain per batch position."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_embeddings):
            raise IndexError("row id out of range")
        g = self.split
        m2 = math.prod(self.row_modes[g:])
        folded = self.table.folded_cores()
        *_, la, ra = self._groups_at(folded, idx // m2, idx % m2)
        a1, a2 = la[-1], ra[0]
        return einsum("unr,rum->unm", a1, a2).reshape(idx.size, self.embedding_dim)

    def backward(self, g_out):
        if self._cache is None:
            raise RuntimeError("backward called before lookup")
        _, plan, ls, rs, ld, rd, la, ra, a1, a2 = self._cache
        g_out = as_tensor(g_out)
        n_batch = plan.inverse_map.size
        if g_out.shape != (n_batch, self.embedding_dim):
            raise ValueError(f"expected grad {(n_batch, self.embedding_dim)}, got {g_out.shape}")
        u = plan.unique_rows.size
        g_rows = np.zeros((u, self.embedding_dim))
        np.add.at(g_rows, plan.inverse_map, g_out)
        g_rows = g_rows.reshape(u, a1.shape[1], a2.shape[2])

        g_a1 = einsum("unm,rum->unr", g_rows, a2)
        g_a2 = einsum("unm,unr->rum", g_rows, a1)
        g_left = np.zeros_like(la[-1])
        np.add.at(g_left, plan.left_inverse, g_a1)
        g_right = np.zeros_like(ra[0])
        np.add.at(g_right, (slice(None), plan.right_inverse), g_a2)

        g_ls = _left_chain_backward(ls, la, g_left)
        g_rs = _right_chain_backward(rs, ra, g_right)
        folded = self.table.folded_cores()
        g_folded = [_scatter(c.shape, z, gs) for c, z, gs in zip(folded, ld + rd, g_ls + g_rs)]
        g_cores, g_diags = _unfold_grads(self.table, g_folded)
        self.grads = (g_cores, g_diags)
        return g_cores, g_diags
