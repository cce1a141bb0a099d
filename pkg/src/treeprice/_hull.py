"""Vectorized inner solver for the generalized convex hull.

Children are piecewise-linear convex functions stacked per *context*
(one context = one hull instance, e.g. one tree node).  Queries are flat
arrays of evaluation points, each tagged with its context index, so one
call can serve a whole time level of a backward sweep or a whole batch
of simulated scenarios.

For entropy weight ``a > 0`` the concave dual

    d(theta) = theta * x - a * log sum_k p_k exp(-c_k(theta) / a),
    c_k(theta) = min_z f_k(z) - theta * z,

is maximized by bisection on the mean residual
``sum_k q_k(theta) x_k*(theta) - x`` with softmin weights
``q_k ∝ p_k exp(-c_k/a)``.  All per-iteration work is elementwise over
``(queries, children)`` with binary searches against per-child slope
arrays, so no iteration materializes anything of size
``queries * breakpoints``.  For ``a = 0`` the hull is the classical
lower convex envelope, computed exactly from the children's vertices.

Bisection updates freeze once a query converges, which makes every
query's trajectory independent of what else sits in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError

_LOG_TINY = -745.0  # exp underflows to exactly 0 below this


@dataclass(eq=False)
class ChildSet:
    """Children of one or more hull instances, padded to common shape."""

    bx: np.ndarray        # (N, m, K) breakpoints, last point repeated as padding
    by: np.ndarray        # (N, m, K) values
    slopes: np.ndarray    # (N, m, K-1) segment slopes, +inf beyond the real ones
    npts: np.ndarray      # (N, m) real breakpoint counts, 0 marks an absent child
    prior: np.ndarray     # (N, m) priors, 0 marks an absent child
    lo_dom: np.ndarray    # (N,) hull domain endpoints
    hi_dom: np.ndarray
    minslope: np.ndarray  # (N,) finite slope range, seeds the dual bracket
    maxslope: np.ndarray

    @property
    def n_ctx(self) -> int:
        return self.bx.shape[0]

    @property
    def m(self) -> int:
        return self.bx.shape[1]

    @property
    def K(self) -> int:
        return self.bx.shape[2]

    @staticmethod
    def build(contexts: list[list[tuple[np.ndarray, np.ndarray, float]]]) -> "ChildSet":
        """Stack ``contexts``; each child is ``(breakpoints, values, prior)``."""
        n = len(contexts)
        m = max(len(c) for c in contexts)
        K = max(2, max(len(ch[0]) for c in contexts for ch in c))
        bx = np.zeros((n, m, K))
        by = np.zeros((n, m, K))
        slopes = np.full((n, m, K - 1), math.inf)
        npts = np.zeros((n, m), dtype=np.int64)
        prior = np.zeros((n, m))
        lo_dom = np.full(n, math.inf)
        hi_dom = np.full(n, -math.inf)
        minsl = np.full(n, math.inf)
        maxsl = np.full(n, -math.inf)
        for i, ctx in enumerate(contexts):
            if not ctx:
                raise InputError("each hull context needs at least one child")
            for k, (cx, cy, p) in enumerate(ctx):
                npk = len(cx)
                bx[i, k, :npk] = cx
                by[i, k, :npk] = cy
                bx[i, k, npk:] = cx[-1]
                by[i, k, npk:] = cy[-1]
                if npk > 1:
                    s = np.diff(cx)
                    sl = np.diff(cy) / s
                    slopes[i, k, : npk - 1] = sl
                    minsl[i] = min(minsl[i], float(sl[0]))
                    maxsl[i] = max(maxsl[i], float(sl[-1]))
                npts[i, k] = npk
                prior[i, k] = p
                lo_dom[i] = min(lo_dom[i], float(cx[0]))
                hi_dom[i] = max(hi_dom[i], float(cx[-1]))
        minsl[~np.isfinite(minsl)] = 0.0
        maxsl[~np.isfinite(maxsl)] = 0.0
        return ChildSet(bx, by, slopes, npts, prior, lo_dom, hi_dom, minsl, maxsl)


def lower_envelope(
    xs: np.ndarray, ys: np.ndarray, src: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower convex hull of a point set, as vertex arrays plus source ids."""
    if src is None:
        src = np.zeros(len(xs), dtype=np.int64)
    order = np.lexsort((ys, xs))
    xs, ys, src = xs[order], ys[order], src[order]
    # drop duplicate abscissae, keeping the lowest value
    keep = np.ones(len(xs), dtype=bool)
    keep[1:] = np.diff(xs) > 0
    xs, ys, src = xs[keep], ys[keep], src[keep]
    sx = max(1.0, float(np.max(np.abs(xs))))
    sy = max(1.0, float(np.max(np.abs(ys))))
    eps = 1e-14 * sx * sy
    hx: list[float] = []
    hy: list[float] = []
    hs: list[int] = []
    for xi, yi, si in zip(xs, ys, src):
        while len(hx) >= 2:
            cross = (hx[-1] - hx[-2]) * (yi - hy[-2]) - (xi - hx[-2]) * (hy[-1] - hy[-2])
            if cross <= eps:
                hx.pop(); hy.pop(); hs.pop()
            else:
                break
        hx.append(float(xi)); hy.append(float(yi)); hs.append(int(si))
    return np.asarray(hx), np.asarray(hy), np.asarray(hs, dtype=np.int64)


def _count_below(cs: ChildSet, ctx: np.ndarray, theta: np.ndarray, strict: bool) -> np.ndarray:
    """Per (query, child): number of slopes < theta (or <= theta)."""
    Q = theta.shape[0]
    m = cs.m
    Ks = cs.K - 1
    ch = np.arange(m)[None, :]
    ctx2 = ctx[:, None]
    lo = np.zeros((Q, m), dtype=np.int64)
    hi = np.full((Q, m), Ks, dtype=np.int64)
    steps = max(1, int(math.ceil(math.log2(Ks + 1))))
    th = theta[:, None]
    for _ in range(steps):
        mid = (lo + hi) // 2
        v = cs.slopes[ctx2, ch, np.minimum(mid, Ks - 1)]
        cond = (v < th) if strict else (v <= th)
        cond &= mid < Ks
        lo = np.where(cond, mid + 1, lo)
        hi = np.where(cond, hi, mid)
    return lo


def _softmin(logp: np.ndarray, c: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights ∝ p_k exp(-c_k/a) and the log-partition a*(M + log Z)."""
    lw = logp - c / a
    M = np.max(lw, axis=1)
    e = np.exp(np.maximum(lw - M[:, None], _LOG_TINY))
    Z = e.sum(axis=1)
    return e / Z[:, None], a * (M + np.log(Z))


def _renormalize(q: np.ndarray) -> np.ndarray:
    for _ in range(4):
        s = q.sum(axis=1)
        if np.all(s == 1.0):
            break
        rows = np.flatnonzero(s != 1.0)
        j = np.argmax(q[rows], axis=1)
        q[rows, j] -= s[rows] - 1.0
    return q


def solve(
    cs: ChildSet,
    a: float,
    x: np.ndarray,
    ctx: np.ndarray,
    dual_tol: float = 1e-9,
    max_iters: int = 200,
    tie_break: str = "nearer",
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Hull values and attaining mixtures at ``x`` (contexts ``ctx``).

    Returns ``(value, weights, points, theta)`` with shapes
    ``(Q,), (Q, m), (Q, m), (Q,)``.  ``theta`` is NaN where the query sat
    at a hull-domain endpoint (the dual slope is unbounded there).
    """
    x = np.asarray(x, dtype=float)
    ctx = np.asarray(ctx, dtype=np.int64)
    lo = cs.lo_dom[ctx]
    hi = cs.hi_dom[ctx]
    scale = np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    if np.any(x < lo - 1e-9 * scale) or np.any(x > hi + 1e-9 * scale):
        bad = int(np.flatnonzero((x < lo - 1e-9 * scale) | (x > hi + 1e-9 * scale))[0])
        raise InputError(
            f"query {x[bad]} outside hull domain [{lo[bad]}, {hi[bad]}]"
        )
    if a < 0:
        raise InputError("entropy weight must be nonnegative")
    if a == 0.0:
        return _solve_classical(cs, x, ctx)
    return _solve_entropy(cs, a, x, ctx, dual_tol, max_iters, tie_break)


def _solve_entropy(cs, a, x, ctx, dual_tol, max_iters, tie_break):
    Q = x.shape[0]
    m = cs.m
    ch = np.arange(m)[None, :]
    ctx2 = ctx[:, None]
    prior = cs.prior[ctx]
    present = prior > 0
    with np.errstate(divide="ignore"):
        logp = np.where(present, np.log(np.maximum(prior, 1e-300)), -math.inf)

    lo = cs.lo_dom[ctx]
    hi = cs.hi_dom[ctx]
    eps_end = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    at_lo = x <= lo + eps_end
    at_hi = (x >= hi - eps_end) & ~at_lo
    interior = ~(at_lo | at_hi)

    value = np.empty(Q)
    weights = np.zeros((Q, m))
    points = np.zeros((Q, m))
    theta = np.full(Q, math.nan)

    first_x = cs.bx[ctx2, ch, 0]
    first_y = cs.by[ctx2, ch, 0]
    last_idx = np.maximum(cs.npts[ctx] - 1, 0)
    last_x = cs.bx[ctx2, ch, last_idx]
    last_y = cs.by[ctx2, ch, last_idx]

    for mask, px, py, bound in ((at_lo, first_x, first_y, lo), (at_hi, last_x, last_y, hi)):
        if not np.any(mask):
            continue
        # only children whose domain reaches the endpoint can carry mass there
        inc = present[mask] & (np.abs(px[mask] - bound[mask][:, None]) <= eps_end[mask][:, None])
        lp = np.where(inc, logp[mask], -math.inf)
        qm, logpart = _softmin(lp, py[mask], a)
        value[mask] = -logpart
        weights[mask] = _renormalize(qm)
        points[mask] = px[mask]

    if np.any(interior):
        iq = np.flatnonzero(interior)
        xi = x[iq]
        ctxi = ctx[iq]
        prior_i = prior[iq]
        logp_i = logp[iq]
        tol = dual_tol * np.maximum(1.0, np.abs(xi))

        def mean_at(th, live):
            idx = _count_below(cs, ctxi[live], th[live], strict=True)
            c2 = ctxi[live][:, None]
            vlo = cs.bx[c2, ch, idx]
            cc = cs.by[c2, ch, idx] - th[live][:, None] * vlo
            qv, _ = _softmin(logp_i[live], cc, a)
            return (qv * vlo).sum(axis=1) - xi[live]

        th_lo = cs.minslope[ctxi] - 1.0
        th_hi = cs.maxslope[ctxi] + 1.0
        for sign, arr in ((1.0, "lo"), (-1.0, "hi")):
            th = th_lo if arr == "lo" else th_hi
            live = np.ones(iq.size, dtype=bool)
            off = 1.0
            for _ in range(70):
                g = mean_at(th, live)
                bad = np.flatnonzero(live)[sign * g > 0]
                if bad.size == 0:
                    break
                need = np.zeros(iq.size, dtype=bool)
                need[bad] = True
                th = np.where(need, th - sign * off, th)
                live = need
                off *= 2.0
            else:
                raise NumericError("hull dual bracket expansion failed")
            if arr == "lo":
                th_lo = th
            else:
                th_hi = th

        th_out = 0.5 * (th_lo + th_hi)
        active = np.ones(iq.size, dtype=bool)
        for _ in range(max_iters):
            if not np.any(active):
                break
            mid = 0.5 * (th_lo + th_hi)
            g = np.zeros(iq.size)
            g[active] = mean_at(mid, active)
            conv = active & (np.abs(g) <= tol)
            th_out = np.where(conv, mid, th_out)
            go_up = active & ~conv & (g < 0)
            go_dn = active & ~conv & (g > 0)
            th_lo = np.where(go_up, mid, th_lo)
            th_hi = np.where(go_dn, mid, th_hi)
            stalled = active & ~conv & (th_hi - th_lo <= 1e-15 * np.maximum(1.0, np.abs(mid)))
            th_out = np.where(stalled, mid, th_out)
            active = active & ~conv & ~stalled
        still = np.flatnonzero(active)
        th_out[still] = 0.5 * (th_lo[still] + th_hi[still])

        # queries that stopped on a jump of the mean: snap theta to the slope
        # value inside the bracket so both sides of the flat face are seen
        idx_lo = _count_below(cs, ctxi, th_out, strict=True)
        idx_hi = _count_below(cs, ctxi, th_out, strict=False)
        vlo = cs.bx[ctxi[:, None], ch, idx_lo]
        vhi = cs.bx[ctxi[:, None], ch, idx_hi]
        cc = cs.by[ctxi[:, None], ch, idx_lo] - th_out[:, None] * vlo
        qv, _ = _softmin(logp_i, cc, a)
        mean_lo = (qv * vlo).sum(axis=1)
        mean_hi = (qv * vhi).sum(axis=1)
        need_snap = (xi < mean_lo - tol) | (xi > mean_hi + tol)
        if np.any(need_snap):
            rows = np.flatnonzero(need_snap)
            rctx = ctxi[rows][:, None]
            # first slope >= th_lo; the mean jumps exactly at slope values
            cnt = _count_below(cs, ctxi[rows], th_lo[rows], strict=True)
            cand = cs.slopes[rctx, ch, np.minimum(cnt, cs.K - 2)]
            ok = (cand >= th_lo[rows][:, None]) & (cand <= th_hi[rows][:, None] + tol[rows][:, None]) & np.isfinite(cand)
            cand = np.where(ok, cand, math.inf)
            snap = cand.min(axis=1)
            has = np.isfinite(snap)
            th_out[rows[has]] = snap[has]
            idx_lo[rows] = _count_below(cs, ctxi[rows], th_out[rows], strict=True)
            idx_hi[rows] = _count_below(cs, ctxi[rows], th_out[rows], strict=False)
            vlo[rows] = cs.bx[rctx, ch, idx_lo[rows]]
            vhi[rows] = cs.bx[rctx, ch, idx_hi[rows]]
            cc[rows] = cs.by[rctx, ch, idx_lo[rows]] - th_out[rows][:, None] * vlo[rows]
            qv[rows], _ = _softmin(logp_i[rows], cc[rows], a)
            mean_lo[rows] = (qv[rows] * vlo[rows]).sum(axis=1)
            mean_hi[rows] = (qv[rows] * vhi[rows]).sum(axis=1)

        qv = _renormalize(qv)
        denom = mean_hi - mean_lo
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(denom > 0, (xi - mean_lo) / np.where(denom > 0, denom, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)
        if tie_break == "left":
            pts = vlo
        else:
            pts = vlo + s[:, None] * (vhi - vlo)
        resid = np.abs((qv * pts).sum(axis=1) - xi)
        if np.any(resid > 1000 * tol):
            worst = int(np.argmax(resid - 1000 * tol))
            raise NumericError(
                f"hull dual failed to meet mean constraint: residual {resid[worst]:.3e} at x={xi[worst]}"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.where(qv > 0, np.log(np.maximum(qv, 1e-300)) - logp_i, 0.0)
        val = (qv * (cc + th_out[:, None] * pts)).sum(axis=1) + a * (qv * lr).sum(axis=1)

        value[iq] = val
        weights[iq] = qv
        points[iq] = pts
        theta[iq] = th_out

    return value, weights, points, theta


class _Envelope:
    __slots__ = ("ex", "ey", "esrc")

    def __init__(self, ex, ey, esrc):
        self.ex = ex
        self.ey = ey
        self.esrc = esrc


def _context_envelope(cs: ChildSet, i: int) -> _Envelope:
    xs, ys, src = [], [], []
    for k in range(cs.m):
        npk = int(cs.npts[i, k])
        if npk == 0:
            continue
        xs.append(cs.bx[i, k, :npk])
        ys.append(cs.by[i, k, :npk])
        src.append(np.full(npk, k, dtype=np.int64))
    hx, hy, hs = lower_envelope(np.concatenate(xs), np.concatenate(ys), np.concatenate(src))
    return _Envelope(hx, hy, hs)


def _solve_classical(cs, x, ctx):
    Q = x.shape[0]
    m = cs.m
    value = np.empty(Q)
    weights = np.zeros((Q, m))
    points = np.zeros((Q, m))
    theta = np.zeros(Q)
    envs = {}
    for i in np.unique(ctx):
        envs[int(i)] = _context_envelope(cs, int(i))
    for i, env in envs.items():
        rows = np.flatnonzero(ctx == i)
        xi = np.clip(x[rows], env.ex[0], env.ex[-1])
        if env.ex.size == 1:
            value[rows] = env.ey[0]
            weights[rows, env.esrc[0]] = 1.0
            points[rows, env.esrc[0]] = env.ex[0]
            continue
        seg = np.clip(np.searchsorted(env.ex, xi, side="right"), 1, env.ex.size - 1)
        x0, x1 = env.ex[seg - 1], env.ex[seg]
        y0, y1 = env.ey[seg - 1], env.ey[seg]
        lam = (x1 - xi) / (x1 - x0)
        value[rows] = lam * y0 + (1 - lam) * y1
        theta[rows] = (y1 - y0) / (x1 - x0)
        k0, k1 = env.esrc[seg - 1], env.esrc[seg]
        scale = max(1.0, abs(float(env.ex[0])), abs(float(env.ex[-1])))
        at_v0 = np.abs(xi - x0) <= 1e-13 * scale
        at_v1 = (np.abs(xi - x1) <= 1e-13 * scale) & ~at_v0
        same = (k0 == k1) & ~at_v0 & ~at_v1
        plain = ~(at_v0 | at_v1 | same)
        w0 = np.where(at_v0 | same, 1.0, np.where(plain, lam, 0.0))
        w1 = np.where(at_v1, 1.0, np.where(plain, 1.0 - lam, 0.0))
        p0 = np.where(same, xi, x0)
        p1 = np.where(at_v1, x1, np.where(same, xi, x1))
        points[rows, k0] = p0
        points[rows, k1] = np.where(w1 > 0, p1, points[rows, k1])
        np.add.at(weights, (rows, k0), w0)
        np.add.at(weights, (rows, k1), w1)
    return value, weights, points, theta
