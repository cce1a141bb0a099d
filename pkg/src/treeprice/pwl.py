"""Convex piecewise-linear functions and the entropy-penalized convex hull.

A :class:`PwlConvex` is a finite convex function on a compact interval,
stored as breakpoints; the convention is ``+inf`` outside the interval.
Degenerate single-point domains are allowed.

The central operation is the generalized convex hull of a family of
convex functions ``f_1..f_m`` with entropy penalties
``g_k(q) = a * q * log(q / p_k)``:

    f(x) = inf { sum_k q_k f_k(x_k) + g_k(q_k) :
                 q in simplex, x_k in dom f_k, sum_k q_k x_k = x }.

For ``a > 0`` the inner problem is solved through its concave scalar
dual ``d(theta) = theta*x - a*log sum_k p_k exp(-c_k(theta)/a)`` with
``c_k(theta) = min_z f_k(z) - theta*z``, maximized by bisection on the
mean constraint.  For ``a = 0`` the hull reduces to the classical lower
convex envelope of the children, which is exact for piecewise-linear
inputs.  The heavy lifting lives in :mod:`treeprice._hull`; this module
provides the value-level API plus the upper/lower piecewise-linear
approximation schemes with their sandwich guarantees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from . import _hull

__all__ = [
    "PwlConvex",
    "HullChild",
    "ApproxSettings",
    "HullAttainment",
    "min_on_interval",
    "support_min",
    "hull_value",
    "hull_upper",
    "hull_lower",
    "hull_brute_force",
    "lower_convex_envelope",
    "upper_concave_envelope",
]

_CONVEXITY_SLACK = 1e-7


@dataclass(frozen=True, eq=False)
class PwlConvex:
    """Convex piecewise-linear function on ``[x[0], x[-1]]``, +inf outside.

    Breakpoints must be strictly increasing (a single point is allowed)
    and segment slopes nondecreasing up to a small numerical slack.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 1 or x.shape != y.shape or x.size == 0:
            raise InputError("breakpoints and values must be equal-length 1-d arrays")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InputError("breakpoints and values must be finite")
        if x.size > 1:
            dx = np.diff(x)
            if np.any(dx <= 0):
                raise InputError("breakpoints must be strictly increasing")
            s = np.diff(y) / dx
            if s.size > 1:
                scale = max(1.0, float(np.max(np.abs(s))))
                if np.any(np.diff(s) < -_CONVEXITY_SLACK * scale):
                    raise InputError("segment slopes must be nondecreasing (convexity)")

    @property
    def lo(self) -> float:
        return float(self.x[0])

    @property
    def hi(self) -> float:
        return float(self.x[-1])

    @property
    def is_point(self) -> bool:
        return self.x.size == 1

    @property
    def slopes(self) -> np.ndarray:
        if self.is_point:
            return np.empty(0)
        return np.diff(self.y) / np.diff(self.x)

    def __call__(self, v: float) -> float:
        """Evaluate at ``v``; returns ``inf`` outside the domain."""
        eps = 1e-12 * max(1.0, abs(self.lo), abs(self.hi))
        if v < self.lo - eps or v > self.hi + eps:
            return math.inf
        if self.is_point:
            return float(self.y[0])
        return float(np.interp(min(max(v, self.lo), self.hi), self.x, self.y))

    def eval_array(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        eps = 1e-12 * max(1.0, abs(self.lo), abs(self.hi))
        out = np.full(v.shape, math.inf)
        inside = (v >= self.lo - eps) & (v <= self.hi + eps)
        if self.is_point:
            out[inside] = self.y[0]
        else:
            out[inside] = np.interp(np.clip(v[inside], self.lo, self.hi), self.x, self.y)
        return out

    def restrict(self, lo: float, hi: float) -> "PwlConvex":
        """Restriction to ``[lo, hi] ∩ dom``; raises if the intersection is empty."""
        l = max(lo, self.lo)
        u = min(hi, self.hi)
        if l > u + 1e-12 * max(1.0, abs(l)):
            raise InputError(f"restriction [{lo}, {hi}] does not meet domain [{self.lo}, {self.hi}]")
        u = max(l, u)
        if l == u or self.is_point:
            return PwlConvex(np.array([l]), np.array([self(l)]))
        keep = (self.x > l) & (self.x < u)
        xs = np.concatenate(([l], self.x[keep], [u]))
        ys = np.concatenate(([self(l)], self.y[keep], [self(u)]))
        return PwlConvex(xs, ys)

    @staticmethod
    def affine(lo: float, hi: float, intercept: float, slope: float) -> "PwlConvex":
        """The function ``intercept + slope*x`` on ``[lo, hi]``."""
        if lo == hi:
            return PwlConvex(np.array([lo]), np.array([intercept + slope * lo]))
        return PwlConvex(np.array([lo, hi]), np.array([intercept + slope * lo, intercept + slope * hi]))


@dataclass(frozen=True, eq=False)
class HullChild:
    """One hull ingredient: a convex function with a strictly positive prior."""

    function: PwlConvex
    prior: float

    def __post_init__(self):
        if not (self.prior > 0):
            raise InputError("hull child prior must be strictly positive")


@dataclass(frozen=True)
class ApproxSettings:
    """Controls for the piecewise-linear hull approximation.

    ``n`` is the number of subintervals per bid-ask interval (the lower
    scheme uses ``n - 1`` interior subintervals plus one exterior anchor
    on each side, so it needs ``n >= 2``); ``dual_tol`` bounds the mean
    constraint residual of the inner bisection.
    """

    method: str = "upper"
    n: int = 150
    dual_tol: float = 1e-9
    max_iters: int = 200

    def __post_init__(self):
        if self.method not in ("upper", "lower"):
            raise InputError(f"method must be 'upper' or 'lower', got {self.method!r}")
        if self.n < 1:
            raise InputError("n must be >= 1")
        if self.method == "lower" and self.n < 2:
            raise InputError("the lower scheme needs n >= 2")
        if not (self.dual_tol > 0):
            raise InputError("dual_tol must be positive")
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class HullAttainment:
    """Optimal value of the hull at one point plus an attaining mixture."""

    value: float
    weights: np.ndarray
    points: np.ndarray
    theta: float  # dual slope; nan at hull-domain endpoints


def min_on_interval(f: PwlConvex, lo: float, hi: float) -> tuple[float, float]:
    """Global minimum of ``f`` over ``[lo, hi] ∩ dom f``.

    Returns ``(argmin, min)`` with the argmin at the midpoint of the
    minimizing face.
    """
    g = f.restrict(lo, hi)
    i = int(np.argmin(g.y))
    m = float(g.y[i])
    scale = max(1.0, float(np.max(np.abs(g.y))))
    flat = np.flatnonzero(g.y <= m + 1e-13 * scale)
    left, right = int(flat[0]), int(flat[-1])
    return 0.5 * (float(g.x[left]) + float(g.x[right])), m


def support_min(f: PwlConvex, theta: float) -> tuple[float, float]:
    """``c(theta) = min_x f(x) - theta*x`` with a minimizing breakpoint.

    Ties resolve to the smallest breakpoint index.
    """
    if f.is_point:
        x0 = float(f.x[0])
        return x0, float(f.y[0]) - theta * x0
    idx = int(np.searchsorted(f.slopes, theta, side="left"))
    xs = float(f.x[idx])
    return xs, float(f.y[idx]) - theta * xs


def _child_set(children: list[HullChild]) -> _hull.ChildSet:
    if not children:
        raise InputError("hull needs at least one child")
    total = sum(c.prior for c in children)
    if abs(total - 1.0) > 1e-9:
        raise InputError(f"child priors must sum to 1, got {total}")
    return _hull.ChildSet.build([[(c.function.x, c.function.y, c.prior) for c in children]])


def hull_value(
    children: list[HullChild],
    a: float,
    x: float,
    settings: ApproxSettings | None = None,
) -> HullAttainment:
    """Generalized convex hull value at ``x`` with an attaining ``(q, x_k)``.

    ``a`` is the entropy weight; ``a = 0`` yields the classical convex
    hull with vertex weights.  Raises :class:`InputError` if ``x`` lies
    outside ``[min_k b_k, max_k a_k]``.
    """
    settings = settings or ApproxSettings()
    cs = _child_set(children)
    val, q, pts, theta = _hull.solve(
        cs,
        float(a),
        np.array([float(x)]),
        np.zeros(1, dtype=np.int64),
        dual_tol=settings.dual_tol,
        max_iters=settings.max_iters,
    )
    return HullAttainment(float(val[0]), q[0].copy(), pts[0].copy(), float(theta[0]))


def _hull_values_on_grid(cs: _hull.ChildSet, a: float, grid: np.ndarray, settings: ApproxSettings) -> np.ndarray:
    vals, _, _, _ = _hull.solve(
        cs,
        float(a),
        grid,
        np.zeros(grid.size, dtype=np.int64),
        dual_tol=settings.dual_tol,
        max_iters=settings.max_iters,
    )
    return vals


def hull_upper(
    children: list[HullChild],
    a: float,
    lo: float,
    hi: float,
    settings: ApproxSettings | None = None,
) -> PwlConvex:
    """Upper approximation: exact hull values on a uniform grid, interpolated.

    The result dominates the exact hull pointwise on ``[lo, hi]`` because
    chords of a convex function lie above it.
    """
    settings = settings or ApproxSettings()
    cs = _child_set(children)
    _check_interval(cs, lo, hi)
    if lo == hi:
        v = _hull_values_on_grid(cs, a, np.array([lo]), settings)
        return PwlConvex(np.array([lo]), v)
    grid = np.linspace(lo, hi, settings.n + 1)
    vals = _hull_values_on_grid(cs, a, grid, settings)
    return PwlConvex(grid, vals)


def hull_lower(
    children: list[HullChild],
    a: float,
    lo: float,
    hi: float,
    settings: ApproxSettings | None = None,
) -> PwlConvex:
    """Lower approximation from intersections of extended alternating chords.

    ``children`` must be minorants of the exact ingredients.  The hull of
    the minorants is sampled at ``n`` interior points plus one exterior
    anchor on each side (one grid step outside ``[lo, hi]``, clipped to
    the hull domain interior); extending the chords and intersecting the
    ones that skip each interval yields a piecewise-linear minorant on
    ``[lo, hi]``.  When an anchor has no room (the interval reaches the
    hull domain boundary) the adjacent interior chord is reused, which
    is exact at the endpoint itself but only approximately a minorant on
    the first subinterval.
    """
    settings = settings or ApproxSettings()
    cs = _child_set(children)
    _check_interval(cs, lo, hi)
    if lo == hi:
        v = _hull_values_on_grid(cs, a, np.array([lo]), settings)
        return PwlConvex(np.array([lo]), v)
    pts_arr, anch_lo, anch_hi = lower_sample_points(
        lo, hi, settings.n, float(cs.lo_dom[0]), float(cs.hi_dom[0])
    )
    gvals = _hull_values_on_grid(cs, a, pts_arr, settings)
    return PwlConvex(*lower_vertices(pts_arr, gvals, settings.n, lo, hi, anch_lo, anch_hi))


def lower_sample_points(
    lo: float, hi: float, n: int, dom_lo: float, dom_hi: float
) -> tuple[np.ndarray, bool, bool]:
    """Sample abscissae for the lower scheme: n interior points + anchors.

    Anchors sit one grid step outside ``[lo, hi]``, clipped to the hull
    domain interior; a side with no room gets no anchor (flagged False).
    """
    interior = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    width = max(dom_hi - dom_lo, hi - lo)
    eps = 1e-12 * max(1.0, abs(dom_lo), abs(dom_hi))
    anchor_lo: float | None = lo - h
    if anchor_lo <= dom_lo + eps:
        anchor_lo = 0.5 * (dom_lo + lo)
        if lo - dom_lo <= 1e-9 * width:
            anchor_lo = None
    anchor_hi: float | None = hi + h
    if anchor_hi >= dom_hi - eps:
        anchor_hi = 0.5 * (hi + dom_hi)
        if dom_hi - hi <= 1e-9 * width:
            anchor_hi = None
    pts = list(interior)
    if anchor_lo is not None:
        pts.insert(0, anchor_lo)
    if anchor_hi is not None:
        pts.append(anchor_hi)
    return np.asarray(pts), anchor_lo is not None, anchor_hi is not None


def lower_vertices(
    pts_arr: np.ndarray,
    gvals: np.ndarray,
    n: int,
    lo: float,
    hi: float,
    anchored_lo: bool,
    anchored_hi: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Chord-intersection vertices of the lower approximation.

    Consecutive samples define chords; extending the chords that skip
    each interval and intersecting them gives points below the sampled
    convex function.  When a side had no exterior anchor the adjacent
    interior chord is duplicated (endpoint-chord reuse).
    """
    slopes = np.diff(gvals) / np.diff(pts_arr)
    if not anchored_lo:
        slopes = np.concatenate(([slopes[0]], slopes))
        pts_arr = np.concatenate(([pts_arr[0]], pts_arr))
        gvals = np.concatenate(([gvals[0]], gvals))
    if not anchored_hi:
        slopes = np.concatenate((slopes, [slopes[-1]]))
    bx = pts_arr
    gv = gvals
    vx = [lo]
    vy = [float(gv[1])]
    for l in range(1, n):
        m_lo, m_hi = float(slopes[l - 1]), float(slopes[l + 1])
        if m_hi > m_lo + 1e-14 * max(1.0, abs(m_lo), abs(m_hi)):
            xi = (m_hi * bx[l + 1] - m_lo * bx[l] + gv[l] - gv[l + 1]) / (m_hi - m_lo)
            xi = min(max(xi, bx[l]), bx[l + 1])
        else:
            xi = 0.5 * (bx[l] + bx[l + 1])
        yi = m_lo * (xi - bx[l]) + gv[l]
        vx.append(float(xi))
        vy.append(float(yi))
    vx.append(hi)
    vy.append(float(gv[n]))
    return _dedupe_increasing(np.asarray(vx), np.asarray(vy))


def _dedupe_increasing(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # intersections can coincide with sample points; keep the lower value
    eps = 1e-13 * max(1.0, float(np.max(np.abs(x))))
    keep_x = [float(x[0])]
    keep_y = [float(y[0])]
    for xi, yi in zip(x[1:], y[1:]):
        if xi <= keep_x[-1] + eps:
            keep_y[-1] = min(keep_y[-1], float(yi))
        else:
            keep_x.append(float(xi))
            keep_y.append(float(yi))
    return np.asarray(keep_x), np.asarray(keep_y)


def _check_interval(cs: _hull.ChildSet, lo: float, hi: float) -> None:
    if lo > hi:
        raise InputError(f"empty interval [{lo}, {hi}]")
    dom_lo, dom_hi = float(cs.lo_dom[0]), float(cs.hi_dom[0])
    eps = 1e-9 * max(1.0, abs(dom_lo), abs(dom_hi))
    if lo < dom_lo - eps or hi > dom_hi + eps:
        raise InputError(
            f"interval [{lo}, {hi}] not contained in hull domain [{dom_lo}, {dom_hi}]"
        )


def hull_brute_force(
    children: list[HullChild],
    a: float,
    x: float,
    resolution: int = 48,
    passes: int = 8,
) -> float:
    """Direct grid minimization of the hull objective; test oracle only.

    Grids the mixture in perspective coordinates ``(q_k, u_k = q_k x_k)``
    for the first ``m - 1`` children (the last child is eliminated
    through the simplex and mean constraints).  The objective is jointly
    convex in these coordinates, so shrinking the search box around the
    incumbent and re-gridding converges to the global minimum.
    Intended for clean instances with non-degenerate child domains.
    """
    m = len(children)
    fs = [c.function for c in children]
    ps = np.array([c.prior for c in children])
    los = np.array([f.lo for f in fs])
    his = np.array([f.hi for f in fs])
    if x < los.min() - 1e-9 or x > his.max() + 1e-9:
        raise InputError("x outside hull domain")
    if m == 1:
        return float(fs[0](x) + a * math.log(1.0 / ps[0]))
    if m > 3:
        raise InputError("brute force supports m <= 3 children")

    d = m - 1
    res = resolution if m == 2 else max(10, resolution // 3)
    boxes = [(0.0, 1.0)] * d + [(min(0.0, los[k]), max(0.0, his[k])) for k in range(d)]
    qeps = 1e-11

    def evaluate(grids: list[np.ndarray]):
        mesh = np.meshgrid(*grids, indexing="ij")
        qs = mesh[:d]
        us = mesh[d:]
        q_last = 1.0 - sum(qs)
        u_last = x - sum(us)
        ok = q_last >= -1e-12
        total = np.zeros_like(q_last)
        ent = np.zeros_like(q_last)
        for k in range(m):
            qk = np.maximum(q_last, 0.0) if k == d else qs[k]
            uk = u_last if k == d else us[k]
            with np.errstate(divide="ignore", invalid="ignore"):
                xk = np.where(qk > qeps, uk / np.maximum(qk, qeps), los[k])
            ok = ok & np.where(
                qk > qeps,
                (xk >= los[k] - 1e-9) & (xk <= his[k] + 1e-9),
                np.abs(uk) <= 1e-9 * max(1.0, abs(x)),
            )
            total = total + np.where(qk > qeps, qk * fs[k].eval_array(np.clip(xk, los[k], his[k])), 0.0)
            ent = ent + np.where(qk > qeps, qk * (np.log(np.maximum(qk, qeps)) - math.log(ps[k])), 0.0)
        val = np.where(ok, total + a * ent, math.inf)
        flat = int(np.argmin(val))
        idx = np.unravel_index(flat, val.shape)
        return float(val[idx]), [float(grids[j][idx[j]]) for j in range(2 * d)]

    best = math.inf
    for _ in range(passes):
        grids = [np.linspace(b[0], b[1], res) for b in boxes]
        val, center = evaluate(grids)
        best = min(best, val)
        new_boxes = []
        for j in range(2 * d):
            lo_j, hi_j = boxes[j]
            half = 2.5 * (hi_j - lo_j) / (res - 1)
            c = center[j]
            lo_n, hi_n = c - half, c + half
            if j < d:
                lo_n, hi_n = max(0.0, lo_n), min(1.0, hi_n)
            new_boxes.append((lo_n, hi_n))
        boxes = new_boxes
    return best


def lower_convex_envelope(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower convex hull (as a function) of a finite point set."""
    return _hull.lower_envelope(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))[:2]


def upper_concave_envelope(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper concave hull of a finite point set (negated lower hull)."""
    hx, hy = lower_convex_envelope(np.asarray(xs, dtype=float), -np.asarray(ys, dtype=float))
    return hx, -hy
