"""Command-line front end: sectioned key=value configs, CSV reports.

Commands map onto the pricing/strategy operations:

* ``price``        seller/buyer indifference prices plus superhedging bounds
* ``disutility``   minimal disutility and the optimal scaling
* ``convergence``  prices against the grid size, both approximation methods
* ``strategy``     shadow price, injections and positions along one scenario
* ``simulate``     seeded Monte-Carlo P&L histogram
* ``check``        robust no-arbitrage witness

Exit codes: 0 success, 1 input error, 2 numeric failure, 3 model
inconsistency.  Report files are written atomically; a failing command
leaves no partial file behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ArbitrageError,
    ConfigError,
    InputError,
    ModelInconsistencyError,
    NumericError,
    TreePriceError,
)
from .market import (
    LatticeParams,
    ScenarioPath,
    TreeModel,
    build_binomial,
    build_explicit,
    check_robust_no_arbitrage,
)
from .payoff import (
    DisutilityProfile,
    PaymentStream,
    call_cash,
    call_physical,
    put_cash,
    put_physical,
)
from .pricing import (
    disutility_value,
    indifference_pair,
    superhedge_ask,
    superhedge_bid,
)
from .pwl import ApproxSettings
from .strategy import injection_path, simulate_pnl, trade_path
from .dual import backward_sweep, shadow_path
from .payoff import aggregate_claim

_SECTIONS = {
    "model": {"type", "steps", "s0", "sigma", "rate", "cost", "p"},
    "disutility": {"inject", "alpha"},
    "claim": {"kind", "delivery", "strike"},
    "endowment": {"kind", "delivery", "strike"},
    "approx": {"method", "n", "dual_tol", "max_iters"},
    "strategy": {"scenario"},
    "simulate": {"scenarios", "seed", "bins"},
    "convergence": {"n_values"},
}
_PREFIX_KEYS = {"model": "node.", "claim": "pay.", "endowment": "pay."}


@dataclass(frozen=True)
class RunConfig:
    """Parsed and validated configuration; raw strings kept for rendering."""

    sections: dict


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned key=value format with line-precise diagnostics."""
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("unterminated section header", line=lineno)
            name = line[1:-1].strip().lower()
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section '{name}'", line=lineno)
            current = name
            sections.setdefault(name, {})
            continue
        if current is None:
            raise ConfigError("key outside any section", line=lineno)
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip().lower()
        value = value.strip()
        allowed = _SECTIONS[current]
        prefix = _PREFIX_KEYS.get(current)
        if key not in allowed and not (prefix and key.startswith(prefix)):
            raise ConfigError(f"unknown key in [{current}]", line=lineno, field=key)
        if key in sections[current]:
            raise ConfigError("duplicate key", line=lineno, field=key)
        sections[current][key] = value
    for required in ("model", "disutility"):
        if required not in sections:
            raise ConfigError(f"missing required section [{required}]")
    cfg = RunConfig(sections)
    # eager validation so diagnostics point at fields, not stack traces
    model = build_model(cfg)
    build_profile(cfg, model.T)
    build_stream(cfg, model, "claim")
    build_stream(cfg, model, "endowment")
    build_settings(cfg)
    return cfg


def render_config(cfg: RunConfig) -> str:
    out = []
    for name, kv in cfg.sections.items():
        out.append(f"[{name}]")
        for k, v in kv.items():
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)


def _get(cfg: RunConfig, section: str, key: str, default=None) -> str | None:
    return cfg.sections.get(section, {}).get(key, default)


def _number(section: str, key: str, value: str, conv):
    try:
        return conv(value)
    except ValueError:
        raise ConfigError(f"malformed number {value!r}", field=f"{section}.{key}")


def build_model(cfg: RunConfig) -> TreeModel:
    sec = cfg.sections["model"]
    kind = sec.get("type", "lattice").lower()
    if kind == "lattice":
        for key in ("steps", "s0", "sigma", "rate", "cost", "p"):
            if key not in sec:
                raise ConfigError("missing key", field=f"model.{key}")
        params = LatticeParams(
            T=_number("model", "steps", sec["steps"], int),
            s0=_number("model", "s0", sec["s0"], float),
            sigma=_number("model", "sigma", sec["sigma"], float),
            r_e=_number("model", "rate", sec["rate"], float),
            k=_number("model", "cost", sec["cost"], float),
            p=_number("model", "p", sec["p"], float),
        )
        return build_binomial(params)
    if kind != "table":
        raise ConfigError(f"model type must be 'lattice' or 'table', got {kind!r}",
                          field="model.type")
    nodes: dict[tuple[int, int], dict] = {}
    for key, value in sec.items():
        if not key.startswith("node."):
            continue
        parts = key.split(".")
        if len(parts) != 3:
            raise ConfigError("node keys look like node.<t>.<i>", field=f"model.{key}")
        t = _number("model", key, parts[1], int)
        i = _number("model", key, parts[2], int)
        entry: dict = {}
        for item in value.split():
            if "=" not in item:
                raise ConfigError("node entries look like bid=... ask=... [parent=... p=...]",
                                  field=f"model.{key}")
            k2, v2 = item.split("=", 1)
            entry[k2] = _number("model", f"{key}.{k2}", v2, float)
        nodes[(t, i)] = entry
    if not nodes:
        raise ConfigError("table model needs node.<t>.<i> entries", field="model.type")
    T = max(t for t, _ in nodes)
    levels = []
    for t in range(T + 1):
        row_idx = sorted(i for (tt, i) in nodes if tt == t)
        if row_idx != list(range(len(row_idx))):
            raise ConfigError(f"node indices at level {t} must be 0..L-1", field="model.node")
        levels.append([nodes[(t, i)] for i in row_idx])
    return build_explicit(levels)


def build_profile(cfg: RunConfig, T: int) -> DisutilityProfile:
    sec = cfg.sections["disutility"]
    raw = sec.get("inject", "").strip()
    if not raw:
        raise ConfigError("injection set must be nonempty", field="disutility.inject")
    if ".." in raw:
        lo_s, hi_s = raw.split("..", 1)
        lo = _number("disutility", "inject", lo_s.strip(), int)
        hi = _number("disutility", "inject", hi_s.strip(), int)
        times = tuple(range(lo, hi + 1))
    else:
        times = tuple(_number("disutility", "inject", s.strip(), int)
                      for s in raw.split(",") if s.strip())
    if not times:
        raise ConfigError("injection set must be nonempty", field="disutility.inject")
    if max(times) > T:
        raise ConfigError("injection dates exceed the horizon", field="disutility.inject")
    raw_a = sec.get("alpha", "").strip()
    if not raw_a:
        raise ConfigError("missing key", field="disutility.alpha")
    parts = [s.strip() for s in raw_a.split(",") if s.strip()]
    if len(parts) == 1:
        alpha = _number("disutility", "alpha", parts[0], float)
        return DisutilityProfile(times, alpha)
    alphas = [_number("disutility", "alpha", s, float) for s in parts]
    if len(alphas) != len(times):
        raise ConfigError("alpha schedule length must match the injection set",
                          field="disutility.alpha")
    return DisutilityProfile(times, alphas)


def build_stream(cfg: RunConfig, model: TreeModel, section: str) -> PaymentStream:
    sec = cfg.sections.get(section, {})
    kind = sec.get("kind", "none").lower()
    if kind == "none":
        stream = PaymentStream.zero(model.T)
    elif kind in ("call", "put"):
        delivery = sec.get("delivery", "physical").lower()
        if delivery not in ("physical", "cash"):
            raise ConfigError("delivery must be 'physical' or 'cash'",
                              field=f"{section}.delivery")
        if "strike" not in sec:
            raise ConfigError("missing key", field=f"{section}.strike")
        strike = _number(section, "strike", sec["strike"], float)
        fn = {
            ("call", "physical"): call_physical,
            ("call", "cash"): call_cash,
            ("put", "physical"): put_physical,
            ("put", "cash"): put_cash,
        }[(kind, delivery)]
        stream = fn(model, strike)
    elif kind == "table":
        pays = {}
        for key, value in sec.items():
            if not key.startswith("pay."):
                continue
            parts = key.split(".")
            if len(parts) != 3:
                raise ConfigError("payment keys look like pay.<t>.<i>", field=f"{section}.{key}")
            t = _number(section, key, parts[1], int)
            i = _number(section, key, parts[2], int)
            cb = cs = 0.0
            for item in value.split():
                if "=" not in item:
                    raise ConfigError("payments look like cash=<v> shares=<v>",
                                      field=f"{section}.{key}")
                k2, v2 = item.split("=", 1)
                if k2 == "cash":
                    cb = _number(section, key, v2, float)
                elif k2 == "shares":
                    cs = _number(section, key, v2, float)
                else:
                    raise ConfigError(f"unknown payment component {k2!r}",
                                      field=f"{section}.{key}")
            pays[(t, i)] = (cb, cs)
        stream = PaymentStream(model.T, pays)
    else:
        raise ConfigError(f"unknown payoff kind {kind!r}", field=f"{section}.kind")
    stream.validate_on(model)
    return stream


def build_settings(cfg: RunConfig) -> ApproxSettings:
    sec = cfg.sections.get("approx", {})
    return ApproxSettings(
        method=sec.get("method", "upper").lower(),
        n=_number("approx", "n", sec.get("n", "150"), int),
        dual_tol=_number("approx", "dual_tol", sec.get("dual_tol", "1e-9"), float),
        max_iters=_number("approx", "max_iters", sec.get("max_iters", "200"), int),
    )


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _write_report(rows: list[list], header: list[str], out: str | None) -> None:
    if out is None:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        return
    d = os.path.dirname(os.path.abspath(out)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".treeprice-", suffix=".csv", dir=d)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _scenario_from(cfg: RunConfig, model: TreeModel, override: str | None) -> ScenarioPath:
    raw = override or _get(cfg, "strategy", "scenario")
    if not raw:
        raise ConfigError("missing key", field="strategy.scenario")
    if "," in raw:
        nodes = tuple(int(s.strip()) for s in raw.split(","))
        path = ScenarioPath(nodes)
    else:
        path = ScenarioPath.from_moves(raw)
    path.validate(model)
    return path


def run(command: str, cfg: RunConfig, out: str | None = None,
        method: str | None = None, n: int | None = None,
        seed: int | None = None, scenario: str | None = None) -> int:
    """Execute one command against a parsed config; returns the exit code."""
    model = build_model(cfg)
    profile = build_profile(cfg, model.T)
    claim = build_stream(cfg, model, "claim")
    endow = build_stream(cfg, model, "endowment")
    settings = build_settings(cfg)
    if method is not None:
        settings = replace(settings, method=method)
    if n is not None:
        settings = replace(settings, n=n)

    if command == "price":
        bid, ask = indifference_pair(model, claim, endow, profile, settings)
        pa = superhedge_ask(model, claim)
        pb = superhedge_bid(model, claim)
        rows = [
            ["indifference_bid", bid.value, bid.method, bid.n],
            ["indifference_ask", ask.value, ask.method, ask.n],
            ["superhedge_bid", pb.value, pb.method, ""],
            ["superhedge_ask", pa.value, pa.method, ""],
        ]
        _write_report(rows, ["quantity", "value", "method", "n"], out)
        return 0

    if command == "disutility":
        v, lam = disutility_value(model, claim, profile, settings)
        rows = [["minimal_disutility", v], ["lambda_hat", lam]]
        _write_report(rows, ["quantity", "value"], out)
        return 0

    if command == "convergence":
        raw = _get(cfg, "convergence", "n_values", "20,50,100,150")
        ns = [int(s.strip()) for s in raw.split(",") if s.strip()]
        if not ns:
            raise ConfigError("sweep list must be nonempty", field="convergence.n_values")
        rows = []
        for nv in ns:
            row = [nv]
            for m in ("upper", "lower"):
                st = replace(settings, method=m, n=nv)
                b, a = indifference_pair(model, claim, endow, profile, st)
                row += [b.value, a.value]
            rows.append(row)
        _write_report(rows, ["n", "upper_bid", "upper_ask", "lower_bid", "lower_ask"], out)
        return 0

    if command == "strategy":
        path = _scenario_from(cfg, model, scenario)
        surface = backward_sweep(model, -aggregate_claim(model, claim), profile, settings)
        tp = trade_path(surface, path, claim, profile)
        rows = []
        for t in range(model.T + 1):
            node = path.nodes[t]
            q = tp.shadow.q_real[t - 1] if t > 0 else 1.0
            rows.append([
                t, node, float(model.bid[t][node]), float(model.ask[t][node]),
                float(tp.shadow.s[t]), float(q), float(tp.injections[t]),
                float(tp.yb[t]), float(tp.ys[t]),
            ])
        _write_report(
            rows,
            ["t", "node", "bid", "ask", "shadow", "q_realized", "injection",
             "y_cash", "y_shares"],
            out,
        )
        return 0

    if command == "simulate":
        sec = cfg.sections.get("simulate", {})
        n_sc = _number("simulate", "scenarios", sec.get("scenarios", "10000"), int)
        sd = seed if seed is not None else _number("simulate", "seed", sec.get("seed", "0"), int)
        bins = _number("simulate", "bins", sec.get("bins", "60"), int)
        summary = simulate_pnl(model, claim, profile, settings, n_sc, sd, bins)
        rows = [
            [float(summary.hist_edges[i]), float(summary.hist_edges[i + 1]), int(c)]
            for i, c in enumerate(summary.hist_counts)
        ]
        _write_report(rows, ["bin_lo", "bin_hi", "count"], out)
        print(
            f"scenarios={summary.n_scenarios} seed={summary.seed} "
            f"mean={summary.mean:.6g} std={summary.std:.6g} "
            f"profit_term={summary.profit_term:.6g}",
            file=sys.stderr,
        )
        return 0

    if command == "check":
        witness = check_robust_no_arbitrage(model)
        rows = []
        for t, prices in enumerate(witness.price):
            for i, s in enumerate(prices):
                rows.append([t, i, float(s)])
        _write_report(rows, ["t", "node", "witness_price"], out)
        return 0

    raise ConfigError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="treeprice",
        description="Indifference and superhedging prices on event trees "
                    "with proportional transaction costs.",
    )
    parser.add_argument("command", choices=[
        "price", "disutility", "convergence", "strategy", "simulate", "check"])
    parser.add_argument("--config", required=True, help="path to the config file")
    parser.add_argument("--method", choices=["upper", "lower"])
    parser.add_argument("--n", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--scenario", help="u/d move string or comma node list")
    parser.add_argument("--out", help="report file (stdout when omitted)")
    args = parser.parse_args(argv)
    try:
        with open(args.config, "r") as fh:
            cfg = parse_config(fh.read())
        return run(args.command, cfg, out=args.out, method=args.method,
                   n=args.n, seed=args.seed, scenario=args.scenario)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except ModelInconsistencyError as e:
        print(f"model inconsistency: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
