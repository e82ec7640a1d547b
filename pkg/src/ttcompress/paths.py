"""Contraction-order planning for tensor networks.

Costs count multiply-adds: contracting two tensors costs the product of the
sizes of every index either one carries.  Three planners are provided:
exhaustive (optimal over binary trees, small networks only), greedy
(smallest result first), and the fixed TT path used by :class:`TTLinear`.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import LETTERS, einsum

__all__ = [
    "ContractionPlan",
    "PlanStep",
    "TensorNetworkSpec",
    "check_grouped_structure",
    "empirical_tt_plan",
    "execute_plan",
    "exhaustive_search",
    "greedy_search",
    "naive_search",
    "parse_network_spec",
    "step_cost",
    "tt_forward_network",
]

MAX_EXHAUSTIVE_NODES = 8


class PlanError(ValueError):
    pass


@dataclass
class TensorNetworkSpec:
    nodes: list[tuple[str, str]]
    sizes: dict[str, int]
    output: str

    def __post_init__(self):
        names = [n for n, _ in self.nodes]
        if len(set(names)) != len(names):
            raise PlanError("duplicate node names")
        for name, sub in self.nodes:
            for ch in sub:
                if ch not in self.sizes:
                    raise PlanError(f"node {name!r}: no size for index {ch!r}")
        present = set("".join(s for _, s in self.nodes))
        for ch in self.output:
            if ch not in present:
                raise PlanError(f"output index {ch!r} appears on no node")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.nodes]

    def subscript(self, name: str) -> str:
        return dict(self.nodes)[name]

    def with_size(self, ch: str, size: int) -> "TensorNetworkSpec":
        sizes = dict(self.sizes)
        sizes[ch] = size
        return TensorNetworkSpec(list(self.nodes), sizes, self.output)


@dataclass
class PlanStep:
    left: str
    right: str
    result: str
    subscript: str
    cost: int


@dataclass
class ContractionPlan:
    steps: list[PlanStep]
    output: str | None = None
    members: dict[str, frozenset] = field(default_factory=dict)

    @property
    def total_cost(self) -> int:
        return sum(s.cost for s in self.steps)

    def describe(self) -> str:
        lines = []
        for k, s in enumerate(self.steps):
            lines.append(f"{k:3d}  {s.left} x {s.right} -> {s.result} [{s.subscript}]  cost={s.cost}")
        lines.append(f"total cost: {self.total_cost}")
        return "\n".join(lines)


def step_cost(left: str, right: str, sizes: Mapping[str, int]) -> int:
    chars = set(left) | set(right)
    for ch in chars:
        if ch not in sizes:
            raise PlanError(f"no size for index {ch!r}")
    return math.prod(sizes[ch] for ch in chars)


def _result_subscript(left: str, right: str, keep: set) -> str:
    out = "".join(ch for ch in left if ch in keep)
    return out + "".join(ch for ch in right if ch in keep and ch not in out)


class _Builder:
    """Accumulates steps while tracking live nodes and their subscripts."""

    def __init__(self, spec: TensorNetworkSpec):
        self.spec = spec
        self.live = dict(spec.nodes)
        self.members = {n: frozenset([n]) for n in spec.names}
        self.steps: list[PlanStep] = []
        self.counter = 0

    def keep_after(self, a: str, b: str) -> set:
        keep = set(self.spec.output)
        for n, s in self.live.items():
            if n not in (a, b):
                keep.update(s)
        return keep

    def preview(self, a: str, b: str) -> tuple[str, int]:
        sa, sb = self.live[a], self.live[b]
        keep = self.keep_after(a, b)
        if len(self.live) == 2:
            sub = self.spec.output
        else:
            sub = _result_subscript(sa, sb, keep)
        return sub, step_cost(sa, sb, self.spec.sizes)

    def contract(self, a: str, b: str, name: str | None = None) -> str:
        sub, cost = self.preview(a, b)
        if name is None:
            name = f"t{self.counter}"
            self.counter += 1
        self.steps.append(PlanStep(a, b, name, sub, cost))
        del self.live[a], self.live[b]
        self.live[name] = sub
        self.members[name] = self.members[a] | self.members[b]
        return name

    def plan(self) -> ContractionPlan:
        return ContractionPlan(self.steps, self.spec.output, self.members)


def naive_search(spec: TensorNetworkSpec) -> ContractionPlan:
    """Left-to-right chain in node order."""
    b = _Builder(spec)
    names = spec.names
    acc = names[0]
    for n in names[1:]:
        acc = b.contract(acc, n)
    return b.plan()


def greedy_search(spec: TensorNetworkSpec) -> ContractionPlan:
    """Repeatedly contract the pair whose result has the fewest elements.

    Pairs sharing an index are preferred; disconnected pairs are considered
    only when no connected pair remains.  Ties go to the cheaper step, then to
    the lexicographically smaller pair of node names.
    """
    b = _Builder(spec)
    while len(b.live) > 1:
        names = list(b.live)
        pairs = [(x, y) for x, y in itertools.combinations(names, 2)
                 if set(b.live[x]) & set(b.live[y])]
        if not pairs:
            pairs = list(itertools.combinations(names, 2))
        best = None
        for x, y in pairs:
            sub, cost = b.preview(x, y)
            size = math.prod(spec.sizes[ch] for ch in sub)
            key = (size, cost, x, y)
            if best is None or key < best[0]:
                best = (key, x, y)
        b.contract(best[1], best[2])
    return b.plan()


def exhaustive_search(spec: TensorNetworkSpec) -> ContractionPlan:
    """Minimum-total-cost binary contraction tree (dynamic program over subsets)."""
    names = spec.names
    k = len(names)
    if k > MAX_EXHAUSTIVE_NODES:
        raise PlanError(f"exhaustive search supports at most {MAX_EXHAUSTIVE_NODES} nodes, got {k}")
    subs = [spec.subscript(n) for n in names]
    full = (1 << k) - 1
    out_set = set(spec.output)

    @functools.lru_cache(maxsize=None)
    def legs(mask: int) -> str:
        if mask == full:
            return spec.output
        if mask & (mask - 1) == 0:
            return subs[mask.bit_length() - 1]
        inside = "".join(subs[i] for i in range(k) if mask >> i & 1)
        outside = set(out_set)
        for i in range(k):
            if not mask >> i & 1:
                outside.update(subs[i])
        seen = []
        for ch in inside:
            if ch in outside and ch not in seen:
                seen.append(ch)
        return "".join(seen)

    @functools.lru_cache(maxsize=None)
    def best(mask: int):
        if mask & (mask - 1) == 0:
            return 0, None
        low = mask & -mask
        result = None
        # enumerate splits with the lowest member on the left to avoid mirror pairs
        sub = (mask - 1) & mask
        while sub:
            if sub & low:
                rest = mask ^ sub
                c1, _ = best(sub)
                c2, _ = best(rest)
                cost = c1 + c2 + step_cost(legs(sub), legs(rest), spec.sizes)
                key = (cost, _encode(sub, k), _encode(rest, k))
                if result is None or key < result[0]:
                    result = (key, sub, rest)
            sub = (sub - 1) & mask
        return result[0][0], (result[1], result[2])

    b = _Builder(spec)
    node_of = {1 << i: names[i] for i in range(k)}

    def emit(mask: int) -> str:
        if mask in node_of:
            return node_of[mask]
        _, (left, right) = best(mask)
        a = emit(left)
        c = emit(right)
        name = b.contract(a, c)
        node_of[mask] = name
        return name

    if k > 1:
        emit(full)
    plan = b.plan()
    return plan


def _encode(mask: int, k: int) -> tuple[int, ...]:
    return tuple(i for i in range(k) if mask >> i & 1)


def execute_plan(plan: ContractionPlan, spec: TensorNetworkSpec, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Run a plan through :func:`einsum`, one pairwise call per step."""
    live = {n: (spec.subscript(n), np.asarray(tensors[n], dtype=float)) for n in spec.names}
    for s in plan.steps:
        sa, a = live.pop(s.left)
        sb, b = live.pop(s.right)
        live[s.result] = (s.subscript, einsum(f"{sa},{sb}->{s.subscript}", a, b))
    (sub, val), = live.values()
    if sub != spec.output:
        val = einsum(f"{sub}->{spec.output}", val)
    return val


# ---------------------------------------------------------------------------
# TT networks


def _tt_chars(p: int, q: int):
    d = p + q
    need = 1 + d + (d - 1)
    if need > len(LETTERS):
        raise PlanError("TT network too large for the subscript alphabet")
    pool = iter(LETTERS.replace("b", ""))
    n_chars = [next(pool) for _ in range(d)]
    r_chars = [next(pool) for _ in range(d - 1)]
    return n_chars, r_chars


def _core_subscripts(n_chars, r_chars):
    d = len(n_chars)
    subs = []
    for i in range(d):
        s = ""
        if i > 0:
            s += r_chars[i - 1]
        s += n_chars[i]
        if i < d - 1:
            s += r_chars[i]
        subs.append(s)
    return subs


def tt_forward_network(dims: Sequence[int], ranks: Sequence[int], b: int, p: int | None = None) -> TensorNetworkSpec:
    """Network ``X (b, n_1..n_p)`` times cores ``G_1..G_{p+q}``.

    Rank-1 boundary bonds are dropped from the core subscripts.  Nodes are
    named ``X`` and ``G1``..``G{p+q}``.
    """
    dims = tuple(dims)
    d = len(dims)
    if p is None:
        if d % 2:
            raise PlanError("odd number of factors: pass p explicitly")
        p = d // 2
    q = d - p
    if len(ranks) != d + 1:
        raise PlanError(f"rank chain needs {d + 1} entries")
    n_chars, r_chars = _tt_chars(p, q)
    sizes = {"b": b}
    sizes.update(zip(n_chars, dims))
    sizes.update(zip(r_chars, ranks[1:-1]))
    nodes = [("X", "b" + "".join(n_chars[:p]))]
    nodes += [(f"G{i + 1}", s) for i, s in enumerate(_core_subscripts(n_chars, r_chars))]
    return TensorNetworkSpec(nodes, sizes, "b" + "".join(n_chars[p:]))


def empirical_tt_plan(dims: Sequence[int], ranks: Sequence[int], b: int, mode: str = "forward",
                      p: int | None = None) -> ContractionPlan:
    """The fixed TT contraction order used by the TT linear layer.

    ``forward``: prefix products ``A_p`` and ``B_q`` then ``T1 = X A_p`` and
    ``Y = T1 B_q``.  ``backward_gX``: the same prefix products, then
    ``U1 = gY B_q`` and ``gX = U1 A_p``.  ``backward_cores``: ``T2``, ``U2``,
    the suffix products and one or two steps per core gradient; this mode has
    many outputs so its plan carries ``output=None``.
    """
    dims = tuple(int(n) for n in dims)
    ranks = tuple(int(r) for r in ranks)
    d = len(dims)
    if d < 2:
        raise PlanError("a TT linear layer needs at least two cores")
    if p is None:
        if d % 2:
            raise PlanError("odd number of factors: pass p explicitly")
        p = d // 2
    if not 1 <= p < d:
        raise PlanError("p must split the factors into two non-empty groups")
    if len(ranks) != d + 1 or ranks[0] != 1 or ranks[-1] != 1 or min(ranks) < 1:
        raise PlanError(f"invalid rank chain {ranks}")
    q = d - p
    net = tt_forward_network(dims, ranks, b, p)
    n_chars, r_chars = _tt_chars(p, q)
    core = dict(net.nodes)
    sizes = dict(net.sizes)
    x_sub = net.subscript("X")
    y_sub = net.output
    rp = r_chars[p - 1]

    steps: list[PlanStep] = []
    members: dict[str, frozenset] = {n: frozenset([n]) for n in net.names}
    subs = dict(core)

    def add(a, c, name, sub):
        steps.append(PlanStep(a, c, name, sub, step_cost(subs[a], subs[c], sizes)))
        subs[name] = sub
        members[name] = members[a] | members[c]
        return name

    # prefix products
    a_name = "G1"
    for i in range(2, p + 1):
        sub = "".join(n_chars[:i]) + r_chars[i - 1]
        a_name = add(a_name, f"G{i}", f"A{i}", sub)
    b_name = f"G{p + 1}"
    for k in range(2, q + 1):
        tail = r_chars[p + k - 1] if p + k < d else ""
        sub = rp + "".join(n_chars[p:p + k]) + tail
        b_name = add(b_name, f"G{p + k}", f"B{k}", sub)

    if mode == "forward":
        add("X", a_name, "T1", "b" + rp)
        add("T1", b_name, "Y", y_sub)
        return ContractionPlan(steps, y_sub, members)

    if mode == "backward_gX":
        subs["gY"] = y_sub
        members["gY"] = frozenset(["gY"])
        add("gY", b_name, "U1", "b" + rp)
        add("U1", a_name, "gX", x_sub)
        return ContractionPlan(steps, x_sub, members)

    if mode != "backward_cores":
        raise PlanError(f"unknown mode {mode!r}")

    subs["gY"] = y_sub
    subs["X"] = x_sub
    subs["T1"] = "b" + rp
    subs["U1"] = "b" + rp
    for n in ("gY", "T1", "U1"):
        members[n] = frozenset([n])
    add("T1", "gY", "T2", rp + "".join(n_chars[p:]))
    add("U1", "X", "U2", rp + "".join(n_chars[:p]))
    # suffix products
    a_neg = {1: f"G{p}"}
    for i in range(2, p):
        lo = p - i  # zero-based index of the new leading core
        sub = r_chars[lo - 1] + "".join(n_chars[lo:p]) + rp
        a_neg[i] = add(f"G{lo + 1}", a_neg[i - 1], f"A-{i}", sub)
    b_neg = {1: f"G{d}"}
    for k in range(2, q):
        lo = d - k
        sub = r_chars[lo - 1] + "".join(n_chars[lo:])
        b_neg[k] = add(f"G{lo + 1}", b_neg[k - 1], f"B-{k}", sub)

    # output-side core gradients
    for k in range(q):
        i = p + k
        target = subs[f"G{i + 1}"]
        if q == 1:
            continue
        left = f"B{k}" if k > 1 else f"G{p + 1}"
        if k == 0:
            add("T2", b_neg[q - 1], f"gG{i + 1}", target)
        elif k == q - 1:
            add("T2", left, f"gG{i + 1}", target)
        else:
            partial = "".join(n_chars[i:]) + r_chars[i - 1]
            lead = add("T2", left, f"T2*{k}", partial)
            add(lead, b_neg[q - k - 1], f"gG{i + 1}", target)
    # input-side core gradients
    for i in range(p):
        target = subs[f"G{i + 1}"]
        if p == 1:
            continue
        left = f"A{i}" if i > 1 else "G1"
        if i == 0:
            add("U2", a_neg[p - 1], f"gG{i + 1}", target)
        elif i == p - 1:
            add("U2", left, f"gG{i + 1}", target)
        else:
            partial = "".join(n_chars[i:p]) + rp + r_chars[i - 1]
            lead = add("U2", left, f"U2*{i}", partial)
            add(lead, a_neg[p - i - 1], f"gG{i + 1}", target)
    return ContractionPlan(steps, None, members)


def check_grouped_structure(plan: ContractionPlan, d: int | None = None, x_name: str = "X") -> bool:
    """True when the plan groups consecutive cores and sweeps X left to right.

    Every step must either merge two core-only nodes whose cores form one
    consecutive range, or merge the node holding ``X`` (which must cover cores
    ``1..j``) with a core-only node covering ``j+1..k``.
    """
    def core_range(members):
        idx = sorted(int(m[1:]) for m in members)
        if idx != list(range(idx[0], idx[-1] + 1)):
            return None
        return idx[0], idx[-1]

    members = dict(plan.members)
    for s in plan.steps:
        ml, mr = members[s.left], members[s.right]
        has_x = [x_name in ml, x_name in mr]
        if all(has_x):
            return False
        if not any(has_x):
            if core_range(ml | mr) is None:
                return False
        else:
            xm, cm = (ml, mr) if has_x[0] else (mr, ml)
            covered = sorted(int(m[1:]) for m in xm if m != x_name)
            if covered and covered != list(range(1, covered[-1] + 1)):
                return False
            rng = core_range(cm)
            if rng is None:
                return False
            start = covered[-1] + 1 if covered else 1
            if rng[0] != start:
                return False
        members[s.result] = ml | mr
    return True


# ---------------------------------------------------------------------------
# network spec files


def parse_network_spec(text: str) -> TensorNetworkSpec:
    """Parse ``name: subscript`` lines plus ``sizes:`` and ``output:`` lines."""
    nodes = []
    sizes = None
    output = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise PlanError(f"line {lineno}: expected 'key: value'")
        key, value = (s.strip() for s in line.split(":", 1))
        if key == "sizes":
            sizes = {}
            for item in value.split(","):
                item = item.strip()
                if not item:
                    continue
                try:
                    ch, n = item.split("=")
                    sizes[ch.strip()] = int(n)
                except ValueError:
                    raise PlanError(f"line {lineno}: bad size entry {item!r}") from None
        elif key == "output":
            output = value
        else:
            nodes.append((key, value))
    if sizes is None:
        raise PlanError("missing 'sizes:' line")
    if output is None:
        raise PlanError("missing 'output:' line")
    if not nodes:
        raise PlanError("no nodes")
    return TensorNetworkSpec(nodes, sizes, output)
