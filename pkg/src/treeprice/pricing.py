"""Top-level prices: minimal disutility, indifference and superhedging bounds.

Indifference prices are differences of the root quantity ``K`` evaluated
at three aggregate claims; superhedging bounds come from an exact
envelope dynamic program (piecewise-linear functions are closed under
convex/concave envelopes, so no gridding is involved there).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import _hull
from .dual import backward_sweep, k_value
from .errors import InputError, ModelInconsistencyError
from .market import TreeModel
from .payoff import AggregateClaim, DisutilityProfile, PaymentStream, aggregate_claim
from .pwl import ApproxSettings, PwlConvex, min_on_interval

__all__ = [
    "PriceQuote",
    "disutility_value",
    "lambda_hat",
    "indifference_ask",
    "indifference_bid",
    "indifference_pair",
    "superhedge_ask",
    "superhedge_bid",
    "one_step_oracle",
    "OneStepQuote",
]


@dataclass(frozen=True)
class PriceQuote:
    """A price with the method that produced it."""

    value: float
    method: str
    n: int
    companion: float | None = None  # same price from the other method, when run
    elapsed: float = 0.0


def _k_of(
    model: TreeModel,
    claim: AggregateClaim,
    profile: DisutilityProfile,
    settings: ApproxSettings,
) -> float:
    """K for one aggregate claim, cached per model instance."""
    cache = model.__dict__.setdefault("_k_cache", {})
    key = (settings.method, settings.n, settings.dual_tol, settings.max_iters,
           profile.key(), claim.key())
    if key not in cache:
        surface = backward_sweep(model, claim, profile, settings)
        cache[key] = k_value(surface)[1]
    return cache[key]


def lambda_hat(profile: DisutilityProfile, k: float) -> float:
    """Optimal dual scaling: ``exp((sum ln(a_t)/a_t - K) / sum 1/a_t)``."""
    return math.exp((profile.log_alpha_term - k) / profile.a0)


def disutility_value(
    model: TreeModel,
    u: PaymentStream,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
) -> tuple[float, float]:
    """Minimal disutility ``V(u)`` and the optimal scaling ``lambda_hat``.

    Both depend on the liability only through its total payment.
    """
    settings = settings or ApproxSettings()
    x = -aggregate_claim(model, u)
    k = _k_of(model, x, profile, settings)
    lam = lambda_hat(profile, k)
    return lam * profile.a0 - len(profile.inject), lam


def indifference_ask(
    model: TreeModel,
    c: PaymentStream,
    w: PaymentStream | None,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
) -> PriceQuote:
    """Seller's indifference price ``K(sum w) - K(sum(w - c))``."""
    settings = settings or ApproxSettings()
    w = w if w is not None else PaymentStream.zero(model.T)
    t0 = time.perf_counter()
    kw = _k_of(model, aggregate_claim(model, w), profile, settings)
    kwc = _k_of(model, aggregate_claim(model, w - c), profile, settings)
    return PriceQuote(kw - kwc, settings.method, settings.n, elapsed=time.perf_counter() - t0)


def indifference_bid(
    model: TreeModel,
    c: PaymentStream,
    w: PaymentStream | None,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
) -> PriceQuote:
    """Buyer's indifference price ``K(sum(w + c)) - K(sum w)``."""
    settings = settings or ApproxSettings()
    w = w if w is not None else PaymentStream.zero(model.T)
    t0 = time.perf_counter()
    kwc = _k_of(model, aggregate_claim(model, w + c), profile, settings)
    kw = _k_of(model, aggregate_claim(model, w), profile, settings)
    return PriceQuote(kwc - kw, settings.method, settings.n, elapsed=time.perf_counter() - t0)


def indifference_pair(
    model: TreeModel,
    c: PaymentStream,
    w: PaymentStream | None,
    profile: DisutilityProfile,
    settings: ApproxSettings | None = None,
) -> tuple[PriceQuote, PriceQuote]:
    """(bid, ask) sharing the endowment sweep."""
    return (
        indifference_bid(model, c, w, profile, settings),
        indifference_ask(model, c, w, profile, settings),
    )


def _root_trading_spread(model: TreeModel) -> tuple[float, float]:
    # builder lattices waive transaction costs at time 0 for the
    # disutility problem; superhedging quotes price in the uniform-spread
    # market, so the root gets its (1 +- k) trading interval back
    if model.params is not None and model.lattice:
        r0 = float(model.ref[0][0])
        return (1.0 - model.params.k) * r0, (1.0 + model.params.k) * r0
    return float(model.bid[0][0]), float(model.ask[0][0])


def _envelope_dp(model: TreeModel, claim: AggregateClaim, sign: float) -> PwlConvex:
    """Backward envelope DP on ``sign * G`` (stored convex); exact."""
    T = model.T
    root_lo, root_hi = _root_trading_spread(model)
    funcs = [
        PwlConvex.affine(float(model.bid[T][i]), float(model.ask[T][i]),
                         sign * float(claim.xb[i]), sign * float(claim.xs[i]))
        for i in range(model.n_nodes(T))
    ]
    for t in range(T - 1, -1, -1):
        nxt = []
        for i in range(model.n_nodes(t)):
            idx, _ = model.successors(t, i)
            xs = np.concatenate([funcs[int(j)].x for j in idx])
            ys = np.concatenate([funcs[int(j)].y for j in idx])
            hx, hy, _ = _hull.lower_envelope(xs, ys)
            env = PwlConvex(hx, hy)
            b = root_lo if t == 0 else float(model.bid[t][i])
            a = root_hi if t == 0 else float(model.ask[t][i])
            lo = max(b, env.lo)
            hi = min(a, env.hi)
            eps = 1e-9 * max(1.0, abs(lo), abs(hi))
            if lo > hi + eps:
                raise ModelInconsistencyError(
                    "empty envelope domain (robust no-arbitrage fails)", node=(t, i))
            nxt.append(env.restrict(min(lo, hi), hi))
        funcs = nxt
    return funcs[0]


def superhedge_ask(model: TreeModel, c: PaymentStream) -> PriceQuote:
    """Cheapest riskless cover of the stream: max of the concave-envelope DP.

    The concave envelope is realized as the negated convex hull of the
    negated successor functions, exact for piecewise-linear inputs.
    """
    t0 = time.perf_counter()
    claim = aggregate_claim(model, c)
    g = _envelope_dp(model, claim, sign=-1.0)
    _, v = min_on_interval(g, g.lo, g.hi)
    return PriceQuote(-v, "exact", 0, elapsed=time.perf_counter() - t0)


def superhedge_bid(model: TreeModel, c: PaymentStream) -> PriceQuote:
    """Largest riskless amount raisable against the stream: min of the convex DP."""
    t0 = time.perf_counter()
    claim = aggregate_claim(model, c)
    g = _envelope_dp(model, claim, sign=1.0)
    _, v = min_on_interval(g, g.lo, g.hi)
    return PriceQuote(v, "exact", 0, elapsed=time.perf_counter() - t0)


@dataclass(frozen=True)
class OneStepQuote:
    """Closed-form one-step quantities (cash claim, zero endowment)."""

    q_min: float
    q_max: float
    k_zero: float
    k_claim: float       # K((D, 0))
    k_minus_claim: float  # K((-D, 0))
    ask: float
    bid: float


def one_step_oracle(
    s0: float,
    bid_d: float,
    ask_d: float,
    bid_u: float,
    ask_u: float,
    alpha: float,
    p: float,
    d_up: float,
    d_down: float,
) -> OneStepQuote:
    """Closed-form prices in the one-step two-state model.

    Requires the ordering ``ask_d < s0 < bid_u`` (no spread at time 0);
    injections at both dates with common risk aversion ``alpha``.  The
    minimizing weight for a cash claim ``Y`` is the softmin
    ``p e^{-alpha Y_u} / (p e^{-alpha Y_u} + (1-p) e^{-alpha Y_d})``
    clamped to the martingale-weight interval.
    """
    if not (0 < bid_d <= ask_d and 0 < bid_u <= ask_u):
        raise InputError("need 0 < bid <= ask in both states")
    if not (ask_d < s0 < bid_u):
        raise InputError("one-step ordering ask_d < s0 < bid_u violated")
    if not (0 < p < 1 and alpha > 0):
        raise InputError("need p in (0,1) and alpha > 0")
    q_min = (s0 - ask_d) / (ask_u - ask_d)
    q_max = (s0 - bid_d) / (bid_u - bid_d)

    def k_of(y_u: float, y_d: float) -> float:
        qhat = p * math.exp(-alpha * y_u) / (
            p * math.exp(-alpha * y_u) + (1 - p) * math.exp(-alpha * y_d)
        )
        q = min(max(qhat, q_min), q_max)
        kl = q * math.log(q / p) + (1 - q) * math.log((1 - q) / (1 - p))
        return kl / alpha + q * y_u + (1 - q) * y_d

    k0 = k_of(0.0, 0.0)
    kp = k_of(d_up, d_down)
    km = k_of(-d_up, -d_down)
    return OneStepQuote(
        q_min=q_min, q_max=q_max, k_zero=k0, k_claim=kp, k_minus_claim=km,
        ask=k0 - km, bid=kp - k0,
    )
