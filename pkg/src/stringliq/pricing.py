"""European option pricing off simulated clearing prices.

Monte Carlo estimators are plain payoff averages over the terminal
clearing price with no discount factor; implied volatilities invert the
Black-Scholes formula (which does carry the rate) by bracketed bisection
with a Newton polish, and smiles are reported against the option's own
delta.  Means are accumulated with exact (fsum) summation so sample-level
identities such as put-call parity hold to full precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DomainError, InversionError
from .gaussian import norm_cdf, norm_pdf

SMILE_HEADER = ["kind", "strike", "delta", "mc_price", "mc_stderr", "implied_vol"]


class OptionKind(str, Enum):
    CALL = "call"
    PUT = "put"


@dataclass(frozen=True)
class OptionSpec:
    strike: float
    expiry: float                 # years from the pricing date
    rate: float = 0.0             # continuously compounded
    kind: OptionKind = OptionKind.CALL

    def __post_init__(self):
        if self.strike <= 0.0 or self.expiry <= 0.0:
            raise ConfigurationError("strike and expiry must be positive")


@dataclass(frozen=True)
class SmilePoint:
    kind: OptionKind
    strike: float
    delta: float
    implied_vol: float
    mc_price: float
    mc_stderr: float


@dataclass(frozen=True)
class McPrice:
    price: float
    stderr: float


def _fsum_mean(values: np.ndarray) -> float:
    return math.fsum(map(float, values)) / values.size


def mc_prices(pi_T: np.ndarray, specs, discount: bool = False) -> list[McPrice]:
    """Monte Carlo payoff means with standard errors.

    Estimates are plain payoff averages by default (no discount factor);
    `discount=True` applies exp(-rate * expiry) per spec for callers who
    want rate-consistent prices at long maturities.
    """
    pi_T = np.asarray(pi_T, dtype=float)
    if pi_T.size < 2:
        raise ConfigurationError("need at least two terminal samples")
    out = []
    for spec in specs:
        if spec.kind == OptionKind.CALL:
            payoff = np.maximum(pi_T - spec.strike, 0.0)
        else:
            payoff = np.maximum(spec.strike - pi_T, 0.0)
        df = math.exp(-spec.rate * spec.expiry) if discount else 1.0
        mean = df * _fsum_mean(payoff)
        stderr = float(df * np.std(payoff, ddof=1) / np.sqrt(payoff.size))
        out.append(McPrice(mean, stderr))
    return out


def _d1(spot: float, spec: OptionSpec, vol: float) -> float:
    return ((math.log(spot / spec.strike)
             + (spec.rate + 0.5 * vol * vol) * spec.expiry)
            / (vol * math.sqrt(spec.expiry)))


def bs_price(spot: float, spec: OptionSpec, vol: float) -> float:
    if spot <= 0.0 or vol <= 0.0:
        raise DomainError("spot and volatility must be positive")
    d1 = _d1(spot, spec, vol)
    d2 = d1 - vol * math.sqrt(spec.expiry)
    disc = math.exp(-spec.rate * spec.expiry)
    call = spot * float(norm_cdf(d1)) - spec.strike * disc * float(norm_cdf(d2))
    if spec.kind == OptionKind.CALL:
        return call
    return call - spot + spec.strike * disc


def bs_delta(spot: float, spec: OptionSpec, vol: float) -> float:
    """Phi(d1) for calls, Phi(-d1) for puts (the positive moneyness index)."""
    if spot <= 0.0 or vol <= 0.0:
        raise DomainError("spot and volatility must be positive")
    d1 = _d1(spot, spec, vol)
    return float(norm_cdf(d1 if spec.kind == OptionKind.CALL else -d1))


def bs_vega(spot: float, spec: OptionSpec, vol: float) -> float:
    return spot * float(norm_pdf(_d1(spot, spec, vol))) * math.sqrt(spec.expiry)


VOL_BRACKET = (1e-6, 5.0)


def implied_vol(spot: float, spec: OptionSpec, target_price: float,
                tol: float = 1e-10) -> tuple[float, bool]:
    """Invert the pricing formula for volatility.

    Returns (vol, boundary_flag); the flag marks targets resolved at the
    bracket edge (e.g. a price exactly at intrinsic value).  Targets
    outside the attainable band raise InversionError.
    """
    if spot <= 0.0:
        raise DomainError("spot must be positive")
    disc = math.exp(-spec.rate * spec.expiry)
    if spec.kind == OptionKind.CALL:
        lower, upper = max(spot - spec.strike * disc, 0.0), spot
    else:
        lower, upper = max(spec.strike * disc - spot, 0.0), spec.strike * disc
    if not lower <= target_price <= upper:
        raise InversionError(
            f"target {target_price!r} outside the attainable band "
            f"[{lower!r}, {upper!r}] for this {spec.kind.value}")

    lo, hi = VOL_BRACKET
    f_lo = bs_price(spot, spec, lo) - target_price
    f_hi = bs_price(spot, spec, hi) - target_price
    price_tol = tol * spot
    if f_lo >= -price_tol:
        return lo, True
    if f_hi <= price_tol:
        return hi, True

    vol = 0.5 * (lo + hi)
    for _ in range(40):       # Newton inside the maintained bracket
        err = bs_price(spot, spec, vol) - target_price
        if err < 0.0:
            lo = vol
        else:
            hi = vol
        if abs(err) <= price_tol and hi - lo <= 1e-9:
            return vol, False
        vega = bs_vega(spot, spec, vol)
        nxt = vol - err / vega if vega > 1e-14 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        vol = nxt

    while hi - lo > 1e-12:    # bisection finishes low-vega strikes
        err = bs_price(spot, spec, vol) - target_price
        if err < 0.0:
            lo = vol
        else:
            hi = vol
        vol = 0.5 * (lo + hi)
    return vol, False


def smile_report(pi_T: np.ndarray, pi_0: float, strikes, rate: float,
                 expiry: float) -> tuple[list[SmilePoint], list[str]]:
    """Per-strike call and put smile rows sorted by delta.

    Inversion failures are recorded as messages and the row omitted.
    """
    points: list[SmilePoint] = []
    failures: list[str] = []
    for kind in (OptionKind.CALL, OptionKind.PUT):
        specs = [OptionSpec(float(k), expiry, rate, kind) for k in strikes]
        prices = mc_prices(pi_T, specs)
        for spec, mc in zip(specs, prices):
            try:
                vol, at_edge = implied_vol(pi_0, spec, mc.price)
            except InversionError as exc:
                failures.append(f"{kind.value} K={spec.strike!r}: {exc}")
                continue
            if at_edge:
                failures.append(
                    f"{kind.value} K={spec.strike!r}: resolved at the vol bracket edge")
                continue
            points.append(SmilePoint(kind, spec.strike,
                                     bs_delta(pi_0, spec, vol), vol,
                                     mc.price, mc.stderr))
    points.sort(key=lambda sp: (sp.kind.value, sp.delta))
    return points, failures


def write_smile_csv(path, points, failures=()) -> None:
    """Smile CSV with inversion failures appended as commented rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SMILE_HEADER)
        for p in points:
            w.writerow([p.kind.value, repr(float(p.strike)), repr(float(p.delta)),
                        repr(float(p.mc_price)), repr(float(p.mc_stderr)),
                        repr(float(p.implied_vol))])
        for msg in failures:
            fh.write(f"# {msg}\n")


def parse_strikes(text: str) -> np.ndarray:
    """Strike ranges 'a:b:step' (inclusive ends) or comma lists 'k1,k2,...'."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"bad strike range {text!r}, want a:b:step")
        a, b, step = (float(p) for p in parts)
        if step <= 0.0 or b < a:
            raise ConfigurationError(f"bad strike range {text!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return a + step * np.arange(n)
    return np.array([float(p) for p in text.split(",") if p.strip()])
