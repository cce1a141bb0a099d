"""Payment streams, option constructors, and claim aggregation.

A payment stream assigns a portfolio ``(cash, shares)`` to tree nodes,
default ``(0, 0)``; the stream is adapted by construction because values
are keyed by node.  The dual engine only ever sees the aggregate
terminal claim ``X = sum_t c_t``, which is what makes prices depend on a
stream only through its total payment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, PathDependenceError
from .market import TreeModel

__all__ = [
    "PaymentStream",
    "AggregateClaim",
    "DisutilityProfile",
    "call_physical",
    "call_cash",
    "put_physical",
    "put_cash",
    "aggregate_claim",
    "shift_cash",
]


@dataclass(frozen=True)
class PaymentStream:
    """Sparse portfolio-valued stream: ``payments[(t, i)] = (cash, shares)``."""

    T: int
    payments: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (t, i), (cb, cs) in self.payments.items():
            if not (0 <= t <= self.T):
                raise InputError(f"payment time {t} outside 0..{self.T}")
            if not (math.isfinite(cb) and math.isfinite(cs)):
                raise InputError("payments must be finite")
            if (cb, cs) != (0.0, 0.0):
                clean[(int(t), int(i))] = (float(cb), float(cs))
        object.__setattr__(self, "payments", clean)

    def get(self, t: int, i: int) -> tuple[float, float]:
        return self.payments.get((t, i), (0.0, 0.0))

    def validate_on(self, model: TreeModel) -> None:
        if self.T != model.T:
            raise InputError("stream horizon differs from model horizon")
        for (t, i) in self.payments:
            if not (0 <= i < model.n_nodes(t)):
                raise InputError(f"payment node ({t}, {i}) not in model")

    def __add__(self, other: "PaymentStream") -> "PaymentStream":
        if self.T != other.T:
            raise InputError("cannot add streams with different horizons")
        keys = set(self.payments) | set(other.payments)
        out = {}
        for k in keys:
            a = self.payments.get(k, (0.0, 0.0))
            b = other.payments.get(k, (0.0, 0.0))
            out[k] = (a[0] + b[0], a[1] + b[1])
        return PaymentStream(self.T, out)

    def __neg__(self) -> "PaymentStream":
        return PaymentStream(self.T, {k: (-v[0], -v[1]) for k, v in self.payments.items()})

    def __sub__(self, other: "PaymentStream") -> "PaymentStream":
        return self + (-other)

    @staticmethod
    def zero(T: int) -> "PaymentStream":
        return PaymentStream(T, {})


@dataclass(frozen=True, eq=False)
class AggregateClaim:
    """Terminal claim ``(X^b, X^s)`` per leaf."""

    xb: np.ndarray
    xs: np.ndarray

    def __post_init__(self):
        xb = np.asarray(self.xb, dtype=float)
        xs = np.asarray(self.xs, dtype=float)
        if xb.shape != xs.shape or xb.ndim != 1:
            raise InputError("claim components must be equal-length 1-d arrays")
        object.__setattr__(self, "xb", xb)
        object.__setattr__(self, "xs", xs)

    def __neg__(self) -> "AggregateClaim":
        return AggregateClaim(-self.xb, -self.xs)

    def shifted(self, delta: float) -> "AggregateClaim":
        return AggregateClaim(self.xb + delta, self.xs)

    def key(self) -> bytes:
        return self.xb.tobytes() + self.xs.tobytes()


@dataclass(frozen=True)
class DisutilityProfile:
    """Injection dates and exponential risk aversions.

    ``inject`` is the set of dates at which external cash may be added;
    at least one is required.  ``alpha`` is either one constant or a
    mapping per injection date.  The tail sums
    ``a_t = sum_{k in I, k >= t} 1/alpha_k`` drive the entropy weights of
    the backward recursion.
    """

    inject: tuple[int, ...]
    alpha: tuple[float, ...]

    def __init__(self, inject, alpha):
        times = tuple(sorted(set(int(t) for t in inject)))
        if not times:
            raise InputError("injection set must be nonempty")
        if times[0] < 0:
            raise InputError("injection dates must be nonnegative")
        if isinstance(alpha, (int, float)):
            alphas = tuple(float(alpha) for _ in times)
        elif isinstance(alpha, dict):
            try:
                alphas = tuple(float(alpha[t]) for t in times)
            except KeyError as e:
                raise InputError(f"missing risk aversion for injection date {e.args[0]}")
        else:
            alphas = tuple(float(a) for a in alpha)
            if len(alphas) != len(times):
                raise InputError("alpha schedule length must match the injection set")
        if any(a <= 0 for a in alphas):
            raise InputError("risk aversions must be strictly positive")
        object.__setattr__(self, "inject", times)
        object.__setattr__(self, "alpha", alphas)

    def alpha_at(self, t: int) -> float:
        return self.alpha[self.inject.index(t)]

    def a(self, t: int) -> float:
        """Tail sum ``sum_{k in I, k >= t} 1/alpha_k`` (0 when the tail is empty)."""
        return sum(1.0 / a for tt, a in zip(self.inject, self.alpha) if tt >= t)

    @property
    def a0(self) -> float:
        return self.a(0)

    @property
    def log_alpha_term(self) -> float:
        """``sum_{t in I} log(alpha_t)/alpha_t`` as used by the optimal scaling."""
        return sum(math.log(a) / a for a in self.alpha)

    def key(self) -> tuple:
        return (self.inject, self.alpha)

    def validate_on(self, model: TreeModel) -> None:
        if self.inject[-1] > model.T:
            raise InputError("injection dates exceed the model horizon")


def call_physical(model: TreeModel, strike: float) -> PaymentStream:
    """Physically delivered call: pay ``(-strike, 1)`` where the stock ends above it.

    On builder lattices the moneyness comparison uses the exact nominal
    node prices and the cash leg is discounted to the expiry date; on
    other trees the strike is taken to be in model (discounted) units.
    """
    if not (strike > 0):
        raise InputError("strike must be positive")
    return _terminal_option(model, strike, kind="call", physical=True)


def call_cash(model: TreeModel, strike: float) -> PaymentStream:
    """Cash-settled call: pay ``((S_T - strike)_+, 0)`` at expiry."""
    if not (strike > 0):
        raise InputError("strike must be positive")
    return _terminal_option(model, strike, kind="call", physical=False)


def put_physical(model: TreeModel, strike: float) -> PaymentStream:
    """Physically delivered put: pay ``(strike, -1)`` where the stock ends below it."""
    if not (strike > 0):
        raise InputError("strike must be positive")
    return _terminal_option(model, strike, kind="put", physical=True)


def put_cash(model: TreeModel, strike: float) -> PaymentStream:
    """Cash-settled put: pay ``((strike - S_T)_+, 0)`` at expiry."""
    if not (strike > 0):
        raise InputError("strike must be positive")
    return _terminal_option(model, strike, kind="put", physical=False)


def _terminal_option(model: TreeModel, strike: float, kind: str, physical: bool) -> PaymentStream:
    T = model.T
    if model.nominal is not None:
        s_ref = model.nominal[T]
        cash_scale = float(model.discount[T])
    else:
        s_ref = model.ref[T]
        cash_scale = 1.0
    pays = {}
    for i, s in enumerate(s_ref):
        if kind == "call":
            hit = s > strike
        else:
            hit = s < strike
        if not hit:
            continue
        if physical:
            sign = 1.0 if kind == "call" else -1.0
            pays[(T, i)] = (-sign * strike * cash_scale, sign * 1.0)
        else:
            intrinsic = (s - strike) if kind == "call" else (strike - s)
            pays[(T, i)] = (intrinsic * cash_scale, 0.0)
    return PaymentStream(T, pays)


def aggregate_claim(model: TreeModel, stream: PaymentStream) -> AggregateClaim:
    """Total claim ``X = sum_t c_t`` evaluated per terminal node.

    On a lattice the sum along a path is only node-well-defined when
    every intermediate payment is constant across its level; otherwise a
    :class:`PathDependenceError` asks for path-tree mode.
    """
    stream.validate_on(model)
    T = model.T
    n_leaf = model.n_nodes(T)
    xb = np.zeros(n_leaf)
    xs = np.zeros(n_leaf)
    for i in range(n_leaf):
        cb, cs = stream.get(T, i)
        xb[i] += cb
        xs[i] += cs
    if model.lattice:
        for t in range(T):
            vals = {stream.get(t, i) for i in range(model.n_nodes(t))}
            if len(vals) > 1:
                raise PathDependenceError(
                    f"intermediate payment at level {t} varies across nodes; "
                    "expand with to_path_tree() first"
                )
            cb, cs = next(iter(vals))
            xb += cb
            xs += cs
        return AggregateClaim(xb, xs)
    # explicit trees have unique parents: accumulate down the tree
    acc_b = [np.zeros(model.n_nodes(t)) for t in range(T + 1)]
    acc_s = [np.zeros(model.n_nodes(t)) for t in range(T + 1)]
    cb0, cs0 = stream.get(0, 0)
    acc_b[0][0], acc_s[0][0] = cb0, cs0
    for t in range(T):
        for i in range(model.n_nodes(t)):
            idx, _ = model.successors(t, i)
            for j in idx:
                jj = int(j)
                cb, cs = stream.get(t + 1, jj)
                acc_b[t + 1][jj] = acc_b[t][i] + cb
                acc_s[t + 1][jj] = acc_s[t][i] + cs
    return AggregateClaim(acc_b[T], acc_s[T])


def shift_cash(stream: PaymentStream, delta: float) -> PaymentStream:
    """Subtract ``delta`` cash at time 0 (the stream ``c - delta*1``)."""
    cb, cs = stream.get(0, 0)
    out = dict(stream.payments)
    out[(0, 0)] = (cb - delta, cs)
    return PaymentStream(stream.T, out)


def expand_stream(model: TreeModel, path_tree: TreeModel, stream: PaymentStream) -> PaymentStream:
    """Re-key a stream from ``model`` onto its path-tree expansion."""
    if path_tree.origin is None:
        raise InputError("target model is not a path-tree expansion")
    out = {}
    for t in range(path_tree.T + 1):
        src = path_tree.origin[t]
        for i, s in enumerate(src):
            cb, cs = stream.get(t, int(s))
            if (cb, cs) != (0.0, 0.0):
                out[(t, i)] = (cb, cs)
    return PaymentStream(path_tree.T, out)
