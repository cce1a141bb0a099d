"""Indifference pricing on event trees with proportional transaction costs.

Core flow: build a :class:`~treeprice.market.TreeModel`, describe the
claim as a :class:`~treeprice.payoff.PaymentStream`, and price it with
the functions in :mod:`treeprice.pricing`; strategies and simulations
live in :mod:`treeprice.strategy`.
"""

from .errors import (
    ArbitrageError,
    ConfigError,
    InputError,
    ModelInconsistencyError,
    NumericError,
    PathDependenceError,
    TreePriceError,
)
from .market import (
    LatticeParams,
    RnaWitness,
    ScenarioPath,
    TreeModel,
    build_binomial,
    build_explicit,
    check_robust_no_arbitrage,
    portfolio_cost,
)
from .payoff import (
    AggregateClaim,
    DisutilityProfile,
    PaymentStream,
    aggregate_claim,
    call_cash,
    call_physical,
    put_cash,
    put_physical,
    shift_cash,
)
from .pwl import (
    ApproxSettings,
    HullAttainment,
    HullChild,
    PwlConvex,
    hull_brute_force,
    hull_lower,
    hull_upper,
    hull_value,
    min_on_interval,
    support_min,
)
from .dual import (
    ShadowPath,
    ShadowStep,
    ValueSurface,
    backward_sweep,
    entropy_h,
    k_value,
    shadow_maps,
    shadow_path,
    shadow_step,
)
from .pricing import (
    OneStepQuote,
    PriceQuote,
    disutility_value,
    indifference_ask,
    indifference_bid,
    indifference_pair,
    lambda_hat,
    one_step_oracle,
    superhedge_ask,
    superhedge_bid,
)
from .strategy import (
    InjectionPath,
    PnLSummary,
    TradePath,
    injection_path,
    simulate_pnl,
    trade_path,
)

__version__ = "0.1.0"
