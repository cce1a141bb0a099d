"""Optimal injections, optimal trades along scenarios, and P&L simulation.

Strategies are reconstructed forward, scenario by scenario: shadow
prices and minimizing weights are path-dependent even on recombinant
lattices, but a single path only needs one hull re-solve per step.  The
simulator advances all scenarios level by level through the same
vectorized solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _hull
from .dual import ShadowPath, ValueSurface, backward_sweep, k_value, shadow_path
from .errors import InputError, NumericError
from .market import ScenarioPath, TreeModel
from .payoff import DisutilityProfile, PaymentStream, aggregate_claim
from .pricing import lambda_hat
from .pwl import ApproxSettings

__all__ = [
    "InjectionPath",
    "TradePath",
    "PnLSummary",
    "injection_path",
    "trade_path",
    "simulate_pnl",
]


@dataclass(frozen=True, eq=False)
class InjectionPath:
    """Cash injections per step; zero off the injection set."""

    x: np.ndarray


@dataclass(eq=False)
class TradePath:
    """Optimal positions along one scenario.

    ``yb``/``ys`` hold the portfolio held from ``t`` to ``t+1``
    (``y_{-1} = 0`` implicitly); ``w`` is the auxiliary process whose
    increments realize the trades.  ``phi`` are the realized per-step
    creation costs of ``dy_t + u_t`` (they equal the injections up to
    surface approximation error).
    """

    scenario: ScenarioPath
    yb: np.ndarray
    ys: np.ndarray
    w: np.ndarray
    injections: np.ndarray
    phi: np.ndarray
    shadow: ShadowPath
    residual_max: float
    slope_dev_max: float


def _surface_matches(surface: ValueSurface, model: TreeModel, u: PaymentStream) -> None:
    x = -aggregate_claim(model, u)
    if x.xb.shape != surface.claim.xb.shape or not (
        np.allclose(x.xb, surface.claim.xb, atol=1e-12)
        and np.allclose(x.xs, surface.claim.xs, atol=1e-12)
    ):
        raise InputError("surface was not built for the liability -sum(u)")


def _injections_from(sp: ShadowPath, profile: DisutilityProfile) -> np.ndarray:
    lam = lambda_hat(profile, sp.k)
    T = sp.s.shape[0] - 1
    x = np.zeros(T + 1)
    with np.errstate(divide="ignore"):
        logs = np.concatenate(([0.0], np.cumsum(np.log(sp.q_real / sp.p_real))))
    for t, alpha in zip(profile.inject, profile.alpha):
        x[t] = (math.log(lam / alpha) + logs[t]) / alpha
    return x


def injection_path(
    surface: ValueSurface,
    scenario: ScenarioPath,
    u: PaymentStream,
    profile: DisutilityProfile | None = None,
) -> InjectionPath:
    """Unique optimal cash injections along ``scenario``.

    ``surface`` must have been built with terminal claim ``-sum(u)``.
    """
    profile = profile or surface.profile
    _surface_matches(surface, surface.model, u)
    sp = shadow_path(surface, scenario)
    return InjectionPath(_injections_from(sp, profile))


def trade_path(
    surface: ValueSurface,
    scenario: ScenarioPath,
    u: PaymentStream,
    profile: DisutilityProfile | None = None,
    residual_tol: float = 1e-5,
    trade_tol: float = 1e-3,
) -> TradePath:
    """Optimal trading strategy along ``scenario``.

    At each non-terminal node the affine system
    ``w_b + w_s * S_{t+1} = -J_{t+1}(S_{t+1}) - a_{t+1} log(q/p)`` over
    the successors is solved by weighted least squares (weights = the
    minimizing ``q``, whose first normal equation pins the mean value of
    ``w`` at the current shadow price).  The stock component is then
    projected onto the trade-at-spread condition: off the bid/ask edges
    only slope noise below ``trade_tol`` is absorbed as "no trade",
    anything larger reports infeasibility.  At expiry ``w_T`` equals the
    total payment, which unwinds the position to zero.
    """
    model = surface.model
    profile = profile or surface.profile
    _surface_matches(surface, model, u)
    sp = shadow_path(surface, scenario)
    T = model.T
    xin = _injections_from(sp, profile)

    u_path = np.array([u.get(t, scenario.nodes[t]) for t in range(T + 1)])
    cum_ub = np.cumsum(u_path[:, 0])
    cum_us = np.cumsum(u_path[:, 1])

    w = np.zeros((T + 1, 2))
    resid_max = 0.0
    dev_max = 0.0
    prev_wb, prev_ws = 0.0, 0.0
    for t in range(T):
        step = sp.steps[t]
        a = surface.a_next[t]
        keep = step.q > 0
        s_next = step.pts[keep]
        qk = step.q[keep]
        jv = np.array([
            surface.funcs[t + 1][int(j)](float(x))
            for j, x in zip(step.nodes[keep], s_next)
        ])
        if a > 0:
            lnterm = a * np.log(qk / step.probs[keep])
        else:
            lnterm = np.zeros_like(qk)
        r = -(jv + lnterm)
        sx = float(np.dot(qk, s_next))
        sxx = float(np.dot(qk, s_next * s_next))
        sy = float(np.dot(qk, r))
        sxy = float(np.dot(qk, s_next * r))
        var = sxx - sx * sx
        scale_var = max(1.0, sxx)
        if var > 1e-14 * scale_var:
            ws_hat = (sxy - sx * sy) / var
        else:
            ws_hat = prev_ws
        ws = _project_trade(
            ws_hat, prev_ws,
            s=float(sp.s[t]),
            bid=float(model.bid[t][scenario.nodes[t]]),
            ask=float(model.ask[t][scenario.nodes[t]]),
            trade_tol=trade_tol, t=t,
        )
        wb = sy - ws * sx
        resid = float(np.max(np.abs(wb + ws * s_next - r))) if len(r) else 0.0
        resid_max = max(resid_max, resid)
        dev_max = max(dev_max, abs(ws - ws_hat))
        w[t] = (wb, ws)
        prev_wb, prev_ws = wb, ws

    w[T] = (float(cum_ub[T]), float(cum_us[T]))
    dws_T = w[T, 1] - prev_ws
    leaf = scenario.nodes[T]
    _check_terminal_trade(
        dws_T, float(sp.s[T]),
        float(model.bid[T][leaf]), float(model.ask[T][leaf]), trade_tol,
    )
    if resid_max > residual_tol:
        raise NumericError(
            f"trade system residual {resid_max:.3e} exceeds tolerance {residual_tol:.1e}"
        )

    ys = w[:, 1] - cum_us
    yb = np.zeros(T + 1)
    yb[0] = w[0, 0] + xin[0] - u_path[0, 0] + sp.k
    with np.errstate(divide="ignore"):
        log_ratio = np.log(sp.q_real / sp.p_real)
    for t in range(1, T + 1):
        a_t = profile.a(t)
        ln_t = a_t * log_ratio[t - 1] if a_t > 0 else 0.0
        yb[t] = yb[t - 1] + (w[t, 0] - w[t - 1, 0]) + xin[t] - u_path[t, 0] - ln_t

    phi = np.empty(T + 1)
    for t in range(T + 1):
        db = yb[t] - (yb[t - 1] if t else 0.0) + u_path[t, 0]
        ds = ys[t] - (ys[t - 1] if t else 0.0) + u_path[t, 1]
        node = scenario.nodes[t]
        phi[t] = db + max(ds, 0.0) * float(model.ask[t][node]) - max(-ds, 0.0) * float(model.bid[t][node])
    return TradePath(scenario, yb, ys, w, xin, phi, sp, resid_max, dev_max)


def _project_trade(ws_hat, prev_ws, s, bid, ask, trade_tol, t):
    scale = max(1.0, abs(s))
    if ask - bid <= 1e-12 * scale:
        return ws_hat
    at_ask = abs(s - ask) <= 1e-9 * scale
    at_bid = abs(s - bid) <= 1e-9 * scale
    d = ws_hat - prev_ws
    if at_ask:
        if d >= 0:
            return ws_hat
        if d >= -trade_tol:
            return prev_ws
    elif at_bid:
        if d <= 0:
            return ws_hat
        if d <= trade_tol:
            return prev_ws
    else:
        if abs(d) <= trade_tol:
            return prev_ws
    raise NumericError(
        f"trade-at-spread violated at step {t}: shadow price {s} in ({bid}, {ask}) "
        f"with stock increment {d:.3e}"
    )


def _check_terminal_trade(dws, s, bid, ask, trade_tol):
    scale = max(1.0, abs(s))
    if ask - bid <= 1e-12 * scale or abs(dws) <= trade_tol:
        return
    if dws > 0 and abs(s - ask) <= 1e-9 * scale:
        return
    if dws < 0 and abs(s - bid) <= 1e-9 * scale:
        return
    raise NumericError(
        f"terminal liquidation trades off the spread edge: dw_s={dws:.3e}, S_T={s}"
    )


@dataclass(eq=False)
class PnLSummary:
    """Distribution of the optimal P&L ``-sum_{t in I} x_t`` over scenarios."""

    n_scenarios: int
    seed: int
    mean: float
    std: float
    quantiles: dict[float, float]
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    profit_term: float      # Remark-type gain component, importance-sampled
    profit_term_se: float
    mean_injection_disutility: float  # sample mean of sum_t v_t(x_t)

    def __post_init__(self):
        if int(self.hist_counts.sum()) != self.n_scenarios:
            raise NumericError("histogram mass must equal the scenario count")


def simulate_pnl(
    model: TreeModel,
    u: PaymentStream,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
    n_scenarios: int = 10000,
    seed: int = 0,
    bins: int = 60,
) -> PnLSummary:
    """Seeded Monte-Carlo of the optimal P&L under the real-world measure.

    Scenarios are drawn with a Philox generator keyed by ``seed`` (one
    uniform per scenario and step), so results are bit-identical across
    runs.  All scenarios advance together through one batched hull solve
    per level.
    """
    settings = settings or ApproxSettings()
    if n_scenarios < 1:
        raise InputError("need at least one scenario")
    surface = backward_sweep(model, -aggregate_claim(model, u), profile, settings)
    s0, k = k_value(surface)
    lam = lambda_hat(profile, k)
    T = model.T
    inject = set(profile.inject)

    rng = np.random.Generator(np.random.Philox(key=seed))
    uni = rng.random((n_scenarios, T))

    node = np.zeros(n_scenarios, dtype=np.int64)
    s = np.full(n_scenarios, s0)
    run = np.zeros(n_scenarios)          # log density along the path
    xsum = np.zeros(n_scenarios)         # sum of injections
    vsum = np.zeros(n_scenarios)         # sum of exponential disutilities
    gain = np.zeros(n_scenarios)         # per-scenario profit-term contribution

    for t in range(T + 1):
        if t in inject:
            alpha = profile.alpha_at(t)
            xt = (math.log(lam / alpha) + run) / alpha
            xsum += xt
            vsum += np.exp(alpha * xt) - 1.0
            gain += (np.exp(run) * run - run) / alpha
        if t == T:
            break
        vals, q, pts, _ = _hull.solve(
            surface.child_sets[t], surface.a_next[t], s, node,
            dual_tol=settings.dual_tol, max_iters=settings.max_iters,
        )
        cp = model.child_p[t][node]
        cum = np.cumsum(cp, axis=1)
        col = (uni[:, t][:, None] >= cum).sum(axis=1)
        col = np.minimum(col, cp.shape[1] - 1)
        rows = np.arange(n_scenarios)
        q_r = q[rows, col]
        p_r = cp[rows, col]
        with np.errstate(divide="ignore"):
            run += np.log(np.maximum(q_r, 1e-300)) - np.log(p_r)
        s = pts[rows, col]
        node = model.child_idx[t][node, col]

    pnl = -xsum
    counts, edges = np.histogram(pnl, bins=bins)
    qs = {p: float(np.quantile(pnl, p)) for p in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return PnLSummary(
        n_scenarios=n_scenarios,
        seed=seed,
        mean=float(pnl.mean()),
        std=float(pnl.std()),
        quantiles=qs,
        hist_edges=edges,
        hist_counts=counts,
        profit_term=float(gain.mean()),
        profit_term_se=float(gain.std() / math.sqrt(n_scenarios)),
        mean_injection_disutility=float(vsum.mean()),
    )
