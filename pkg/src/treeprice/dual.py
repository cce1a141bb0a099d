"""Backward value surface, K(X), and the forward shadow construction.

The backward sweep builds, per node, a convex piecewise-linear
approximant of the value function: terminal functions are the exact
affine claim values on the bid-ask interval, and each earlier node is
the entropy-penalized hull of its successors (priors = transition
probabilities, entropy weight = tail sum ``a_{t+1}``), restricted to the
node's own spread and sampled on a grid (method ``upper``) or bracketed
from below by chord intersections (method ``lower``).

``K(X)`` is the minimum of the root function over the root spread.  The
forward pass re-solves the hull at visited points, recovering the
minimizing transition weights, successor shadow prices and the running
density, which is all the strategy layer needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _hull
from .errors import InputError, ModelInconsistencyError
from .market import ScenarioPath, TreeModel
from .payoff import AggregateClaim, DisutilityProfile
from .pwl import (
    ApproxSettings,
    PwlConvex,
    lower_sample_points,
    lower_vertices,
    min_on_interval,
)

__all__ = [
    "ValueSurface",
    "ShadowStep",
    "ShadowPath",
    "backward_sweep",
    "k_value",
    "shadow_step",
    "shadow_path",
    "entropy_h",
    "shadow_maps",
]


@dataclass(eq=False)
class ValueSurface:
    """Per-node value-function approximants plus the data they came from."""

    model: TreeModel
    claim: AggregateClaim
    profile: DisutilityProfile
    settings: ApproxSettings
    funcs: list[list[PwlConvex]]
    child_sets: list[_hull.ChildSet]
    a_next: list[float]

    @property
    def method(self) -> str:
        return self.settings.method

    def root(self) -> PwlConvex:
        return self.funcs[0][0]


def backward_sweep(
    model: TreeModel,
    claim: AggregateClaim,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
) -> ValueSurface:
    """Build the value surface for terminal claim ``claim``.

    Terminal functions are stored exactly (affine); gridding starts one
    level down.  Nodes whose spread misses the hull domain of their
    successors indicate an inconsistent model (failed no-arbitrage).
    """
    settings = settings or ApproxSettings()
    profile.validate_on(model)
    T = model.T
    if claim.xb.shape[0] != model.n_nodes(T):
        raise InputError("claim size does not match the number of terminal nodes")

    funcs: list[list[PwlConvex]] = [None] * (T + 1)  # type: ignore
    funcs[T] = [
        PwlConvex.affine(float(model.bid[T][i]), float(model.ask[T][i]),
                         float(claim.xb[i]), float(claim.xs[i]))
        for i in range(model.n_nodes(T))
    ]
    child_sets: list[_hull.ChildSet] = [None] * T  # type: ignore
    a_next = [profile.a(t + 1) for t in range(T)]

    for t in range(T - 1, -1, -1):
        contexts = []
        for i in range(model.n_nodes(t)):
            idx, pr = model.successors(t, i)
            contexts.append([
                (funcs[t + 1][int(j)].x, funcs[t + 1][int(j)].y, float(p))
                for j, p in zip(idx, pr)
            ])
        cs = _hull.ChildSet.build(contexts)
        child_sets[t] = cs
        funcs[t] = _level_functions(model, t, cs, a_next[t], settings)
    return ValueSurface(model, claim, profile, settings, funcs, child_sets, a_next)


def _level_functions(
    model: TreeModel,
    t: int,
    cs: _hull.ChildSet,
    a: float,
    settings: ApproxSettings,
) -> list[PwlConvex]:
    n_nodes = model.n_nodes(t)
    grids: list[np.ndarray] = []
    meta: list[tuple] = []
    for i in range(n_nodes):
        bid, ask = float(model.bid[t][i]), float(model.ask[t][i])
        dom_lo, dom_hi = float(cs.lo_dom[i]), float(cs.hi_dom[i])
        lo, hi = max(bid, dom_lo), min(ask, dom_hi)
        eps = 1e-9 * max(1.0, abs(lo), abs(hi))
        if lo > hi + eps:
            raise ModelInconsistencyError(
                "node spread does not meet the successors' price span "
                "(robust no-arbitrage fails)", node=(t, i),
            )
        if lo > hi:
            lo = hi = 0.5 * (lo + hi)
        if lo == hi:
            grids.append(np.array([lo]))
            meta.append(("point", lo, hi, False, False))
        elif settings.method == "upper":
            grids.append(np.linspace(lo, hi, settings.n + 1))
            meta.append(("upper", lo, hi, False, False))
        else:
            pts, anch_lo, anch_hi = lower_sample_points(lo, hi, settings.n, dom_lo, dom_hi)
            grids.append(pts)
            meta.append(("lower", lo, hi, anch_lo, anch_hi))
    counts = [g.size for g in grids]
    x_all = np.concatenate(grids)
    ctx_all = np.repeat(np.arange(n_nodes, dtype=np.int64), counts)
    vals, _, _, _ = _hull.solve(
        cs, a, x_all, ctx_all, dual_tol=settings.dual_tol, max_iters=settings.max_iters
    )
    out: list[PwlConvex] = []
    pos = 0
    for i in range(n_nodes):
        g = grids[i]
        v = vals[pos: pos + g.size]
        pos += g.size
        kind, lo, hi, anch_lo, anch_hi = meta[i]
        if kind == "point":
            out.append(PwlConvex(np.array([lo]), np.array([v[0]])))
        elif kind == "upper":
            out.append(PwlConvex(g, _convex_repair(g, v)))
        else:
            vx, vy = lower_vertices(g, v, settings.n, lo, hi, anch_lo, anch_hi)
            out.append(PwlConvex(vx, vy))
    return out


def _convex_repair(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Clamp microscopic convexity violations from solver round-off."""
    if x.size < 3:
        return y
    s = np.diff(y) / np.diff(x)
    if np.all(np.diff(s) >= 0):
        return y
    hx, hy = _hull.lower_envelope(x, y)[:2]
    return np.interp(x, hx, hy)


def k_value(surface: ValueSurface) -> tuple[float, float]:
    """Root minimum: ``K = min J_0`` over the root spread, with its argmin."""
    model = surface.model
    return min_on_interval(surface.root(), float(model.bid[0][0]), float(model.ask[0][0]))


@dataclass(eq=False)
class ShadowStep:
    """Attaining mixture of one hull re-solve at a node."""

    nodes: np.ndarray     # successor indices
    probs: np.ndarray     # transition probabilities
    q: np.ndarray         # minimizing weights (sum to 1)
    pts: np.ndarray       # successor shadow prices
    theta: float          # dual slope (nan at hull-domain endpoints)
    value: float          # hull value at the queried point


def shadow_step(surface: ValueSurface, t: int, node: int, s: float,
                tie_break: str = "nearer") -> ShadowStep:
    """Re-solve the hull at ``x = s`` on the stored successors of ``(t, node)``."""
    if not (0 <= t < surface.model.T):
        raise InputError("shadow_step needs a non-terminal time")
    cs = surface.child_sets[t]
    val, q, pts, theta = _hull.solve(
        cs,
        surface.a_next[t],
        np.array([float(s)]),
        np.array([node], dtype=np.int64),
        dual_tol=surface.settings.dual_tol,
        max_iters=surface.settings.max_iters,
        tie_break=tie_break,
    )
    idx, pr = surface.model.successors(t, node)
    m = len(idx)
    return ShadowStep(idx, pr, q[0, :m].copy(), pts[0, :m].copy(), float(theta[0]), float(val[0]))


@dataclass(eq=False)
class ShadowPath:
    """Shadow prices, minimizing weights and running density along one scenario.

    ``steps[t]`` holds the full attaining mixture at time ``t`` (all
    successors, not only the realized one); ``q_real``/``p_real`` are the
    realized transition weights, and ``density`` is the running product
    ``prod q/p`` with ``density[0] = 1``.
    """

    scenario: ScenarioPath
    s: np.ndarray
    steps: list[ShadowStep]
    q_real: np.ndarray
    p_real: np.ndarray
    density: np.ndarray
    k: float
    values: np.ndarray    # hull value at (t, s_t); terminal claim value at T


def shadow_path(surface: ValueSurface, scenario: ScenarioPath,
                tie_break: str = "nearer") -> ShadowPath:
    model = surface.model
    scenario.validate(model)
    T = model.T
    s0, k = k_value(surface)
    s = np.empty(T + 1)
    s[0] = s0
    steps: list[ShadowStep] = []
    q_real = np.empty(T)
    p_real = np.empty(T)
    density = np.ones(T + 1)
    values = np.empty(T + 1)
    for t in range(T):
        step = shadow_step(surface, t, scenario.nodes[t], float(s[t]), tie_break=tie_break)
        steps.append(step)
        values[t] = step.value
        col = int(np.flatnonzero(step.nodes == scenario.nodes[t + 1])[0])
        q_real[t] = step.q[col]
        p_real[t] = step.probs[col]
        s[t + 1] = step.pts[col]
        density[t + 1] = density[t] * (q_real[t] / p_real[t] if p_real[t] > 0 else math.inf)
    leaf = scenario.nodes[T]
    values[T] = float(surface.claim.xb[leaf] + surface.claim.xs[leaf] * s[T])
    return ShadowPath(scenario, s, steps, q_real, p_real, density, k, values)


def entropy_h(
    model: TreeModel,
    weights: list[np.ndarray],
    prices: list[np.ndarray],
    profile: DisutilityProfile,
    claim: AggregateClaim,
    mart_tol: float = 1e-8,
) -> float:
    """Direct evaluation of the dual objective for a given martingale pair.

    ``weights[t]`` are transition weights aligned with ``child_idx[t]``
    (padding entries 0) and ``prices[t]`` the price selection per node.
    Raises :class:`InputError` when prices leave the spread or the
    martingale identity fails beyond ``mart_tol`` (relative).
    """
    profile.validate_on(model)
    T = model.T
    q_prob = [np.zeros(model.n_nodes(t)) for t in range(T + 1)]
    q_prob[0][0] = 1.0
    total = 0.0
    for t in range(T + 1):
        st = np.asarray(prices[t], dtype=float)
        scale = np.maximum(1.0, np.abs(model.ask[t]))
        if np.any(st < model.bid[t] - 1e-9 * scale) or np.any(st > model.ask[t] + 1e-9 * scale):
            raise InputError(f"price selection leaves the bid-ask spread at level {t}")
    for t in range(T):
        w = np.asarray(weights[t], dtype=float)
        if w.shape != model.child_p[t].shape:
            raise InputError(f"weight shape mismatch at level {t}")
        a = profile.a(t + 1)
        for i in range(model.n_nodes(t)):
            qi = q_prob[t][i]
            idx, pr = model.successors(t, i)
            m = len(idx)
            qrow = w[i, :m]
            if abs(qrow.sum() - 1.0) > 1e-9:
                raise InputError(f"transition weights at node ({t}, {i}) do not sum to 1")
            if np.any(qrow < -1e-12):
                raise InputError(f"negative transition weight at node ({t}, {i})")
            kids = np.asarray(prices[t + 1])[idx]
            mean = float(np.dot(qrow, kids))
            s_t = float(prices[t][i])
            if qi > 0 and abs(mean - s_t) > mart_tol * max(1.0, abs(s_t)):
                raise InputError(
                    f"martingale identity fails at node ({t}, {i}): {mean} vs {s_t}"
                )
            np.add.at(q_prob[t + 1], idx, qi * qrow)
            if qi > 0 and a > 0:
                with np.errstate(divide="ignore", invalid="ignore"):
                    kl = np.where(qrow > 0, qrow * np.log(np.maximum(qrow, 1e-300) / pr), 0.0)
                total += a * qi * float(kl.sum())
    leaf_vals = claim.xb + claim.xs * np.asarray(prices[T])
    total += float(np.dot(q_prob[T], leaf_vals))
    return total


def shadow_maps(surface: ValueSurface) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-node weights/prices of the constructed pair, for explicit trees.

    Only valid on models whose nodes are path prefixes (no recombining),
    where the forward construction visits each node exactly once.
    """
    model = surface.model
    if model.lattice:
        raise InputError("shadow_maps needs an explicit (path) tree; expand the lattice first")
    T = model.T
    prices = [np.zeros(model.n_nodes(t)) for t in range(T + 1)]
    weights = [np.zeros_like(model.child_p[t]) for t in range(T)]
    s0, _ = k_value(surface)
    prices[0][0] = s0
    stack = [(0, 0)]
    while stack:
        t, i = stack.pop()
        if t == T:
            continue
        step = shadow_step(surface, t, i, float(prices[t][i]))
        for col, j in enumerate(step.nodes):
            jj = int(j)
            weights[t][i, col] = step.q[col]
            prices[t + 1][jj] = step.pts[col]
            stack.append((t + 1, jj))
    return weights, prices
