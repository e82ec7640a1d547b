"""TT-compressed linear layer ``Y = X W + bias``.

The weight ``W`` (``N1 x N2``) is stored as a TT over the factor list
``(n_1..n_p, n_{p+1}..n_{p+q})`` where the first ``p`` modes multiply to ``N1``.
Forward and backward follow a fixed contraction order: build the core prefix
products ``A_i = G_1..G_i`` and ``B_k = G_{p+1}..G_{p+k}`` once, contract the
batch against ``A_p`` to get ``T1 (b, r_p)``, then against ``B_q``.  The
backward pass reuses ``T1`` and the suffix products ``A_{-i}``, ``B_{-k}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import as_tensor, einsum
from .tt import TTTensor, init_tt, tt_reconstruct

__all__ = ["PrefixProducts", "TTLinear", "TTLinearGrads", "split_factors"]


def split_factors(factors: Sequence[int], in_features: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split a factor list where the running product first equals ``in_features``."""
    prod = 1
    for i, n in enumerate(factors):
        prod *= n
        if prod == in_features:
            if i + 1 == len(factors):
                break
            return tuple(factors[: i + 1]), tuple(factors[i + 1:])
        if prod > in_features:
            break
    raise ValueError(f"no prefix of {tuple(factors)} multiplies to {in_features}")


@dataclass
class PrefixProducts:
    """Partial chains of the folded cores.

    ``A[i-1]`` is ``A_i`` as a ``(n_1..n_i, r_i)`` matrix; ``A_neg[i-1]`` is
    ``A_{-i}`` as ``(r_{p-i}, n_{p-i+1}..n_p, r_p)``; ``B[k-1]`` is ``B_k`` as
    ``(r_p, n_{p+1}..n_{p+k}, r_{p+k})``; ``B_neg[k-1]`` is ``B_{-k}`` as
    ``(r_{p+q-k}, n_{p+q-k+1}..n_{p+q})``.  Suffix lists stop one short of the
    full chain, which the backward pass never needs.
    """

    folded: list[np.ndarray]
    A: list[np.ndarray]
    B: list[np.ndarray]
    A_neg: list[np.ndarray] | None = None
    B_neg: list[np.ndarray] | None = None


@dataclass
class TTLinearGrads:
    g_x: np.ndarray
    g_cores: list[np.ndarray]
    g_diags: list[np.ndarray]
    g_bias: np.ndarray | None


class TTLinear:
    """Linear layer with a TT-factorized weight and rank-control diagonals."""

    kind = "tt"

    def __init__(
        self,
        in_modes: Sequence[int],
        out_modes: Sequence[int],
        ranks,
        bias: bool = True,
        seed=0,
        weight: TTTensor | None = None,
    ):
        self.in_modes = tuple(int(n) for n in in_modes)
        self.out_modes = tuple(int(n) for n in out_modes)
        self.in_features = math.prod(self.in_modes)
        self.out_features = math.prod(self.out_modes)
        if weight is None:
            weight = init_tt(self.in_modes + self.out_modes, ranks, seed=seed,
                             fan_in=self.in_features)
        if weight.modes != self.in_modes + self.out_modes:
            raise ValueError(f"weight modes {weight.modes} do not match layer modes")
        self.weight = weight
        self.bias = np.zeros(self.out_features) if bias else None
        self.grads: TTLinearGrads | None = None
        self.nonce = 0
        self._cache = None
        self._prefix: PrefixProducts | None = None

    @classmethod
    def from_factors(cls, factors, in_features, ranks, **kw) -> "TTLinear":
        in_modes, out_modes = split_factors(factors, in_features)
        return cls(in_modes, out_modes, ranks, **kw)

    @property
    def p(self) -> int:
        return len(self.in_modes)

    @property
    def q(self) -> int:
        return len(self.out_modes)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.weight.ranks

    def dense_weight(self) -> np.ndarray:
        return tt_reconstruct(self.weight).reshape(self.in_features, self.out_features)

    def parameters(self) -> list[np.ndarray]:
        params = list(self.weight.cores) + list(self.weight.diags)
        if self.bias is not None:
            params.append(self.bias)
        return params

    def gradients(self) -> list[np.ndarray]:
        g = self.grads
        out = list(g.g_cores) + list(g.g_diags)
        if self.bias is not None:
            out.append(g.g_bias)
        return out

    def trains(self) -> list[TTTensor]:
        return [self.weight]

    # ------------------------------------------------------------------
    # prefix and suffix products

    def build_prefix_products(self) -> PrefixProducts:
        f = self.weight.folded_cores()
        p, q = self.p, self.q
        A = [f[0].reshape(f[0].shape[1], f[0].shape[2])]
        for i in range(1, p):
            prev = A[-1]
            nxt = einsum("xa,anb->xnb", prev, f[i])
            A.append(nxt.reshape(prev.shape[0] * f[i].shape[1], f[i].shape[2]))
        B = [f[p]]
        for k in range(1, q):
            prev = B[-1]
            nxt = einsum("axb,bnc->axnc", prev, f[p + k])
            B.append(nxt.reshape(prev.shape[0], prev.shape[1] * f[p + k].shape[1], f[p + k].shape[2]))
        self._prefix = PrefixProducts(f, A, B)
        return self._prefix

    def _build_suffix_products(self, pp: PrefixProducts) -> None:
        f = pp.folded
        p, q = self.p, self.q
        A_neg = []
        if p > 1:
            A_neg.append(f[p - 1])
            for i in range(2, p):
                core = f[p - i]
                nxt = einsum("anb,bxc->anxc", core, A_neg[-1])
                A_neg.append(nxt.reshape(core.shape[0], core.shape[1] * A_neg[-1].shape[1], A_neg[-1].shape[-1]))
        B_neg = []
        if q > 1:
            last = f[p + q - 1]
            B_neg.append(last.reshape(last.shape[0], last.shape[1]))
            for k in range(2, q):
                core = f[p + q - k]
                nxt = einsum("anb,bx->anx", core, B_neg[-1])
                B_neg.append(nxt.reshape(core.shape[0], core.shape[1] * B_neg[-1].shape[1]))
        pp.A_neg, pp.B_neg = A_neg, B_neg

    # ------------------------------------------------------------------
    # propagation

    def forward(self, x) -> np.ndarray:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input (b, {self.in_features}), got {x.shape}")
        pp = self.build_prefix_products()
        A_p = pp.A[-1]
        B_q = pp.B[-1].reshape(pp.B[-1].shape[0], self.out_features)
        t1 = einsum("bx,xr->br", x, A_p)
        y = einsum("br,ry->by", t1, B_q)
        if self.bias is not None:
            y = y + self.bias
        self.nonce += 1
        self._cache = (self.nonce, x, t1)
        return y

    def backward(self, g_y) -> TTLinearGrads:
        if self._cache is None or self._prefix is None:
            raise RuntimeError("backward called before forward")
        g_y = as_tensor(g_y)
        _, x, t1 = self._cache
        if g_y.shape != (x.shape[0], self.out_features):
            raise ValueError(f"expected output grad {(x.shape[0], self.out_features)}, got {g_y.shape}")
        pp = self._prefix
        if pp.A_neg is None:
            self._build_suffix_products(pp)
        p, q = self.p, self.q
        r = self.weight.ranks
        rp = r[p]
        A_p = pp.A[-1]
        B_q = pp.B[-1].reshape(rp, self.out_features)

        u1 = einsum("by,ry->br", g_y, B_q)
        g_x = einsum("br,xr->bx", u1, A_p)

        g_folded: list[np.ndarray] = [None] * (p + q)

        # output-side cores
        t2 = einsum("br,by->ry", t1, g_y)
        modes = self.out_modes
        for k in range(q):
            n = modes[k]
            P = math.prod(modes[:k])
            Q = math.prod(modes[k + 1:])
            t2r = t2.reshape(rp, P, n, Q)
            if k == 0 and q == 1:
                g = t2r.reshape(rp, n, 1)
            elif k == 0:
                right = pp.B_neg[q - 2]
                g = einsum("anq,yq->any", t2r.reshape(rp, n, Q), right)
            elif k == q - 1:
                left = pp.B[k - 1]
                g = einsum("apn,apx->xn", t2r.reshape(rp, P, n), left)[..., None]
            else:
                left = pp.B[k - 1]
                right = pp.B_neg[q - k - 2]
                g = einsum("apnq,apx,yq->xny", t2r, left, right)
            g_folded[p + k] = g

        # input-side cores
        u2 = einsum("br,bx->rx", u1, x)
        modes = self.in_modes
        for i in range(p):
            n = modes[i]
            P = math.prod(modes[:i])
            Q = math.prod(modes[i + 1:])
            u2r = u2.reshape(rp, P, n, Q)
            if i == 0 and p == 1:
                g = u2r.reshape(rp, n).T[None]
            elif i == 0:
                right = pp.A_neg[p - 2]
                g = einsum("anq,yqa->ny", u2r.reshape(rp, n, Q), right)[None]
            elif i == p - 1:
                left = pp.A[i - 1]
                g = einsum("apn,px->xna", u2r.reshape(rp, P, n), left)
            else:
                left = pp.A[i - 1]
                right = pp.A_neg[p - i - 2]
                g = einsum("apnq,px,yqa->xny", u2r, left, right)
            g_folded[i] = g

        g_cores, g_diags = _unfold_grads(self.weight, g_folded)
        g_bias = g_y.sum(axis=0) if self.bias is not None else None
        self.grads = TTLinearGrads(g_x, g_cores, g_diags, g_bias)
        return self.grads

    # ------------------------------------------------------------------

    def flop_estimate(self, b: int, include_prefix: bool = False) -> int:
        """Multiply-adds of the forward path, from shapes alone.

        By default only the two batch contractions are counted; with
        ``include_prefix`` the core prefix products are added too.
        """
        r = self.weight.ranks
        p, q = self.p, self.q
        cost = b * self.in_features * r[p] + b * r[p] * self.out_features
        if include_prefix:
            modes = self.in_modes + self.out_modes
            for i in range(1, p):
                cost += math.prod(modes[: i + 1]) * r[i] * r[i + 1]
            for k in range(1, q):
                cost += r[p] * math.prod(modes[p: p + k + 1]) * r[p + k] * r[p + k + 1]
        return cost


def _unfold_grads(train, g_folded):
    """Map gradients of folded cores back to raw cores and diagonals."""
    g_cores = [g_folded[0]]
    g_diags = []
    for j, (g, c) in enumerate(zip(train.diags, train.cores[1:])):
        gf = g_folded[j + 1]
        shape = (-1,) + (1,) * (c.ndim - 1)
        g_cores.append(g.reshape(shape) * gf)
        g_diags.append((gf * c).reshape(c.shape[0], math.prod(c.shape[1:])).sum(axis=1))
    return g_cores, g_diags
