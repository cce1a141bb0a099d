"""Finite event trees with bid/ask prices and the robust no-arbitrage check.

A :class:`TreeModel` holds per-level node arrays; nodes are addressed as
``(t, i)``.  Two flavors exist: recombinant binomial lattices (built by
:func:`build_binomial`, node ``i`` at level ``t`` means ``i`` up-moves)
and explicit trees in which every node has exactly one parent.  All
prices are stored in discounted units, so cash has constant price 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArbitrageError, InputError, ModelInconsistencyError

__all__ = [
    "LatticeParams",
    "TreeModel",
    "ScenarioPath",
    "RnaWitness",
    "build_binomial",
    "build_explicit",
    "portfolio_cost",
    "check_robust_no_arbitrage",
]


@dataclass(frozen=True)
class LatticeParams:
    """Binomial lattice over one year with ``T`` rehedging dates.

    ``sigma`` is the annual volatility, ``r_e`` the annual effective
    rate, ``k`` the proportional cost fraction and ``p`` the real-world
    up-move probability.  There are no transaction costs at time 0.
    """

    T: int
    s0: float
    sigma: float
    r_e: float
    k: float
    p: float

    def __post_init__(self):
        if self.T < 1:
            raise InputError("T must be >= 1")
        if not (self.s0 > 0):
            raise InputError("s0 must be positive")
        if self.sigma < 0:
            raise InputError("sigma must be nonnegative")
        if not (0.0 <= self.k < 1.0):
            raise InputError("k must lie in [0, 1)")
        if not (0.0 < self.p < 1.0):
            raise InputError("p must lie in (0, 1)")


@dataclass(eq=False)
class TreeModel:
    """Event tree with per-node bid/ask prices and transition probabilities.

    Immutable after construction; all operations on it are pure.
    """

    T: int
    bid: list[np.ndarray]
    ask: list[np.ndarray]
    ref: list[np.ndarray]
    child_idx: list[np.ndarray]   # (L_t, m) int, -1 padding; length T
    child_p: list[np.ndarray]     # (L_t, m) float, 0 padding
    lattice: bool
    params: LatticeParams | None = None
    nominal: list[np.ndarray] | None = None
    discount: np.ndarray | None = None
    origin: list[np.ndarray] | None = None  # path-tree expansion: source node per node
    path_mult: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.bid) != self.T + 1 or len(self.child_idx) != self.T:
            raise InputError("level arrays do not match the horizon")
        for t in range(self.T + 1):
            b, a = self.bid[t], self.ask[t]
            if np.any(b <= 0) or np.any(a < b):
                raise InputError(f"need 0 < bid <= ask at every node (level {t})")
        for t in range(self.T):
            ci, cp = self.child_idx[t], self.child_p[t]
            real = ci >= 0
            if np.any(real.sum(axis=1) < 1):
                raise InputError(f"non-terminal node without successors at level {t}")
            if np.any(cp[real] <= 0):
                raise InputError("transition probabilities must be strictly positive")
            sums = cp.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-9):
                raise InputError("successor probabilities must sum to 1 at each node")
            if np.any(ci[real] >= len(self.bid[t + 1])):
                raise InputError("successor index out of range")
        if self.lattice and self.path_mult is not None:
            for t, w in enumerate(self.path_mult):
                if int(w.sum()) != 2 ** t:
                    raise InputError("lattice path multiplicities must sum to the path count")

    # -- structure ---------------------------------------------------------

    def n_nodes(self, t: int) -> int:
        return len(self.bid[t])

    def node_count(self) -> int:
        return sum(len(b) for b in self.bid)

    def successors(self, t: int, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Real (unpadded) successor indices and transition probabilities."""
        ci = self.child_idx[t][i]
        real = ci >= 0
        return ci[real], self.child_p[t][i][real]

    def node_probabilities(self) -> list[np.ndarray]:
        """Real-world probability mass reaching each node, level by level."""
        out = [np.ones(1)]
        for t in range(self.T):
            nxt = np.zeros(self.n_nodes(t + 1))
            ci, cp = self.child_idx[t], self.child_p[t]
            for i in range(self.n_nodes(t)):
                idx, pr = self.successors(t, i)
                np.add.at(nxt, idx, out[t][i] * pr)
            out.append(nxt)
        return out

    def enumerate_paths(self, cap: int = 1 << 20):
        """Yield ``(ScenarioPath, probability)`` over all scenarios."""
        if self.lattice and 2 ** self.T > cap:
            raise InputError("too many paths to enumerate")
        stack = [((0,), 1.0)]
        while stack:
            nodes, prob = stack.pop()
            t = len(nodes) - 1
            if t == self.T:
                yield ScenarioPath(nodes), prob
                continue
            idx, pr = self.successors(t, nodes[-1])
            for j in range(len(idx) - 1, -1, -1):
                stack.append((nodes + (int(idx[j]),), prob * float(pr[j])))

    def to_path_tree(self, cap: int = 1 << 16) -> "TreeModel":
        """Explicit tree whose nodes are path prefixes of this model."""
        bid = [self.bid[0].copy()]
        ask = [self.ask[0].copy()]
        ref = [self.ref[0].copy()]
        origin = [np.zeros(1, dtype=np.int64)]
        child_idx: list[np.ndarray] = []
        child_p: list[np.ndarray] = []
        for t in range(self.T):
            src = origin[t]
            counts = [len(self.successors(t, int(i))[0]) for i in src]
            total = int(np.sum(counts))
            if total > cap:
                raise InputError("path tree too large to materialize")
            m = max(counts)
            ci = np.full((len(src), m), -1, dtype=np.int64)
            cp = np.zeros((len(src), m))
            nxt_origin = np.empty(total, dtype=np.int64)
            pos = 0
            for row, i in enumerate(src):
                idx, pr = self.successors(t, int(i))
                for j in range(len(idx)):
                    ci[row, j] = pos
                    cp[row, j] = pr[j]
                    nxt_origin[pos] = idx[j]
                    pos += 1
            child_idx.append(ci)
            child_p.append(cp)
            origin.append(nxt_origin)
            bid.append(self.bid[t + 1][nxt_origin])
            ask.append(self.ask[t + 1][nxt_origin])
            ref.append(self.ref[t + 1][nxt_origin])
        nominal = None
        if self.nominal is not None:
            nominal = [self.nominal[t][origin[t]] for t in range(self.T + 1)]
        return TreeModel(
            T=self.T, bid=bid, ask=ask, ref=ref, child_idx=child_idx, child_p=child_p,
            lattice=False, params=self.params, nominal=nominal, discount=self.discount,
            origin=origin,
        )


@dataclass(frozen=True)
class ScenarioPath:
    """Successor-linked node indices ``(i_0, ..., i_T)``, root first."""

    nodes: tuple[int, ...]

    def validate(self, model: TreeModel) -> None:
        if len(self.nodes) != model.T + 1 or self.nodes[0] != 0:
            raise InputError("scenario must start at the root and span the horizon")
        for t in range(model.T):
            idx, _ = model.successors(t, self.nodes[t])
            if self.nodes[t + 1] not in idx:
                raise InputError(f"node {self.nodes[t + 1]} is not a successor at step {t}")

    @staticmethod
    def from_moves(moves: str) -> "ScenarioPath":
        """Lattice path from a string of ``u``/``d`` moves."""
        nodes = [0]
        for c in moves.lower():
            if c == "u":
                nodes.append(nodes[-1] + 1)
            elif c == "d":
                nodes.append(nodes[-1])
            else:
                raise InputError(f"scenario string may contain only 'u' and 'd', got {c!r}")
        return ScenarioPath(tuple(nodes))


def build_binomial(params: LatticeParams) -> TreeModel:
    """Recombinant binomial lattice in discounted units.

    Node prices are computed from the net move count, so the at-the-money
    node of an even level sits exactly at ``s0`` and strict moneyness
    comparisons are stable.  A cash amount fixed at time ``t`` in nominal
    units is worth ``(1+r_e)**(-t/T)`` times as much here.
    """
    T = params.T
    h = 1.0 / T
    step = params.sigma * math.sqrt(h)
    disc = (1.0 + params.r_e) ** (-np.arange(T + 1) * h)
    nominal, ref, bid, ask, mult = [], [], [], [], []
    for t in range(T + 1):
        j = 2 * np.arange(t + 1) - t  # net up-moves
        nom = params.s0 * np.exp(step * j)
        r = nom * disc[t]
        nominal.append(nom)
        ref.append(r)
        if t == 0:
            bid.append(r.copy())
            ask.append(r.copy())
        else:
            bid.append((1.0 - params.k) * r)
            ask.append((1.0 + params.k) * r)
        mult.append(np.array([math.comb(t, i) for i in range(t + 1)], dtype=float))
    child_idx = []
    child_p = []
    for t in range(T):
        i = np.arange(t + 1)
        ci = np.stack([i, i + 1], axis=1)
        cp = np.tile([1.0 - params.p, params.p], (t + 1, 1))
        child_idx.append(ci.astype(np.int64))
        child_p.append(cp)
    return TreeModel(
        T=T, bid=bid, ask=ask, ref=ref, child_idx=child_idx, child_p=child_p,
        lattice=True, params=params, nominal=nominal, discount=disc, path_mult=mult,
    )


def build_explicit(
    levels: list[list[dict]],
) -> TreeModel:
    """Explicit tree from per-level node dicts.

    Each node dict needs ``bid`` and ``ask`` (and optionally ``ref``);
    non-root nodes need ``parent`` (index at the previous level) and
    ``p`` (transition probability from that parent).
    """
    T = len(levels) - 1
    if T < 1:
        raise InputError("an explicit tree needs at least two levels")
    if len(levels[0]) != 1:
        raise InputError("the root level must contain exactly one node")
    bid, ask, ref = [], [], []
    for t, nodes in enumerate(levels):
        if not nodes:
            raise InputError(f"level {t} is empty")
        b = np.array([float(n["bid"]) for n in nodes])
        a = np.array([float(n["ask"]) for n in nodes])
        r = np.array([float(n.get("ref", 0.5 * (float(n["bid"]) + float(n["ask"])))) for n in nodes])
        bid.append(b); ask.append(a); ref.append(r)
    child_idx, child_p = [], []
    for t in range(T):
        kids: list[list[tuple[int, float]]] = [[] for _ in levels[t]]
        for j, n in enumerate(levels[t + 1]):
            if "parent" not in n or "p" not in n:
                raise InputError(f"node {j} at level {t + 1} needs 'parent' and 'p'")
            par = int(n["parent"])
            if not (0 <= par < len(levels[t])):
                raise InputError(f"node {j} at level {t + 1} has parent out of range")
            kids[par].append((j, float(n["p"])))
        m = max(len(k) for k in kids)
        ci = np.full((len(kids), m), -1, dtype=np.int64)
        cp = np.zeros((len(kids), m))
        for i, k in enumerate(kids):
            for col, (j, p) in enumerate(k):
                ci[i, col] = j
                cp[i, col] = p
        child_idx.append(ci)
        child_p.append(cp)
    return TreeModel(T=T, bid=bid, ask=ask, ref=ref, child_idx=child_idx,
                     child_p=child_p, lattice=False)


def portfolio_cost(model: TreeModel, t: int, i: int, x: tuple[float, float]) -> float:
    """Cash cost of creating portfolio ``x = (cash, shares)`` at node ``(t, i)``.

    Shares are bought at the ask and shorted against the bid; the
    liquidation value is ``-portfolio_cost(node, -x)``.
    """
    xb, xs = x
    a = float(model.ask[t][i])
    b = float(model.bid[t][i])
    return xb + max(xs, 0.0) * a - max(-xs, 0.0) * b


@dataclass(eq=False)
class RnaWitness:
    """Strictly interior martingale pair certifying robust no-arbitrage."""

    price: list[np.ndarray]           # S_t per node, inside relint[bid, ask]
    weights: list[np.ndarray]         # (L_t, m) transition weights, 0 on padding

    def as_maps(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return self.price, self.weights


def check_robust_no_arbitrage(model: TreeModel) -> RnaWitness:
    """Backward interval propagation per node; returns an interior witness.

    The admissible set at a terminal node is ``relint[bid, ask]``; at an
    interior node it is ``relint[bid, ask]`` intersected with the open
    convex span of the successors' admissible sets.  Raises
    :class:`ArbitrageError` at the first node whose set comes out empty.
    """
    # admissible sets: (lo, hi, is_point); open interval unless is_point
    adm: list[list[tuple[float, float, bool]]] = [None] * (model.T + 1)  # type: ignore

    def relint(b: float, a: float) -> tuple[float, float, bool]:
        return (b, a, b == a)

    def intersect(s1, s2, node):
        lo1, hi1, p1 = s1
        lo2, hi2, p2 = s2
        if p1 and p2:
            if lo1 == lo2:
                return s1
        elif p1:
            if lo2 < lo1 < hi2:
                return s1
        elif p2:
            if lo1 < lo2 < hi1:
                return s2
        else:
            lo, hi = max(lo1, lo2), min(hi1, hi2)
            if lo < hi:
                return (lo, hi, False)
        raise ArbitrageError("robust no-arbitrage fails", node=node)

    adm[model.T] = [relint(float(b), float(a)) for b, a in zip(model.bid[model.T], model.ask[model.T])]
    for t in range(model.T - 1, -1, -1):
        row = []
        for i in range(model.n_nodes(t)):
            idx, _ = model.successors(t, i)
            subs = [adm[t + 1][int(j)] for j in idx]
            if len(subs) == 1:
                span = subs[0]
            else:
                lo = min(s[0] for s in subs)
                hi = max(s[1] for s in subs)
                span = (lo, hi, lo == hi)
            row.append(intersect(relint(float(model.bid[t][i]), float(model.ask[t][i])), span, (t, i)))
        adm[t] = row

    # forward witness, top-down: every node takes the midpoint of its
    # admissible set, except where a parent pins it (single-successor
    # chains and straddle repairs); once pinned a price never moves
    price = [np.empty(model.n_nodes(t)) for t in range(model.T + 1)]
    pinned = [np.zeros(model.n_nodes(t), dtype=bool) for t in range(model.T + 1)]
    weights = [np.zeros_like(model.child_p[t]) for t in range(model.T)]

    def midpoint(s):
        lo, hi, pt = s
        return lo if pt else 0.5 * (lo + hi)

    price[0][0] = midpoint(adm[0][0])
    pinned[0][0] = True
    for t in range(model.T):
        for i in range(model.n_nodes(t)):
            s_t = float(price[t][i])
            idx, pr = model.successors(t, i)
            sets = [adm[t + 1][int(j)] for j in idx]
            vals = [
                float(price[t + 1][int(j)]) if pinned[t + 1][int(j)] else midpoint(s)
                for j, s in zip(idx, sets)
            ]
            scale = max(1.0, abs(s_t))
            if len(idx) == 1:
                j = int(idx[0])
                if pinned[t + 1][j] and abs(vals[0] - s_t) > 1e-12 * scale:
                    raise ModelInconsistencyError(
                        "witness conflict on a shared single-successor node", node=(t + 1, j)
                    )
                vals = [s_t]
                q = np.array([1.0])
            elif all(abs(v - s_t) <= 1e-12 * scale for v in vals):
                q = pr.copy()
            else:
                def repair(side: int) -> None:
                    # move one adjustable child strictly to the required side
                    for c, (lo, hi, pt) in enumerate(sets):
                        j = int(idx[c])
                        if pinned[t + 1][j] or pt:
                            continue
                        if side < 0 and lo < s_t:
                            vals[c] = 0.5 * (lo + min(s_t, hi))
                            return
                        if side > 0 and hi > s_t:
                            vals[c] = 0.5 * (max(s_t, lo) + hi)
                            return
                    raise ModelInconsistencyError(
                        "witness construction cannot straddle the parent price", node=(t, i)
                    )

                if min(vals) >= s_t:
                    repair(-1)
                if max(vals) <= s_t:
                    repair(+1)
                q = _straddle_weights(np.asarray(vals), s_t)
            for col, j in enumerate(idx):
                jj = int(j)
                weights[t][i, col] = q[col]
                if not pinned[t + 1][jj]:
                    price[t + 1][jj] = vals[col]
                    pinned[t + 1][jj] = True
    return RnaWitness(price=price, weights=weights)


def _straddle_weights(pts: np.ndarray, target: float) -> np.ndarray:
    """Strictly positive weights with the prescribed mean.

    Assumes ``min(pts) < target < max(pts)``; all entries get at least a
    small share, the extremes absorb the balance.
    """
    n = len(pts)
    i = int(np.argmin(pts))
    j = int(np.argmax(pts))
    others = [k for k in range(n) if k not in (i, j)]
    eps = 0.25 / max(n, 2)
    for _ in range(60):
        rem = 1.0 - eps * len(others)
        r = target - eps * float(np.sum(pts[others])) if others else target
        qj = (r - rem * pts[i]) / (pts[j] - pts[i])
        qi = rem - qj
        if qi > 0 and qj > 0:
            q = np.full(n, eps)
            q[i], q[j] = qi, qj
            return q / q.sum()
        eps *= 0.5
    raise ModelInconsistencyError("failed to construct interior witness weights")
