"""Finite-factor price family admitting a riskless buy-and-hold gain.

The price curve P(x, t) = mu(t) + sigma(x) h(Z(t)) with increasing mu,
increasing bounded sigma and positive bounded h has the property that at
the root x* of sigma the price carries no noise at all, so holding x*
shares earns the deterministic drift of the liquidation value of the
block.  The demo verifies the strict wealth bound

    V(t) - V(0) > x* delta0 (mu(t) - mu(0)),   delta0 = mu(0) + min sigma h,

path by path against simulated noise, with the liquidation value
computed by adaptive quadrature of the curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import ConfigurationError, NumericalError
from .string_field import GridSpec, sample_sheet


@dataclass(frozen=True)
class FiniteFactorModel:
    mu: Callable[[float], float]
    mu_prime: Callable[[float], float]
    sigma: Callable[[float], float]
    h: Callable[[float], float]
    x_min: float
    x_max: float
    y_range: tuple[float, float] = (-np.pi, np.pi)   # search window for extremes of h

    def x_star(self) -> float:
        """Positive root of sigma; refuses models without one."""
        lo, hi = self.x_min, self.x_max
        s_lo, s_hi = self.sigma(lo), self.sigma(hi)
        if s_lo * s_hi > 0.0:
            raise ConfigurationError("sigma has no root inside the position range")
        root = float(brentq(self.sigma, lo, hi, xtol=1e-14, rtol=1e-15))
        if root <= 0.0:
            raise ConfigurationError(f"root of sigma must be positive, got {root!r}")
        return root

    def delta0(self, n_grid: int = 2001) -> float:
        """mu(0) plus the minimum of sigma(x) h(y) over a dense grid."""
        xs = np.linspace(self.x_min, self.x_max, n_grid)
        ys = np.linspace(self.y_range[0], self.y_range[1], n_grid)
        sig = np.array([self.sigma(x) for x in xs])
        hv = np.array([self.h(y) for y in ys])
        if np.any(hv <= 0.0):
            raise ConfigurationError("h must be strictly positive")
        lo = min(sig.min() * hv.max(), sig.min() * hv.min(),
                 sig.max() * hv.max(), sig.max() * hv.min())
        return float(self.mu(0.0) + lo)

    def price(self, x: float, t: float, z: float) -> float:
        return float(self.mu(t) + self.sigma(x) * self.h(z))


def default_model() -> FiniteFactorModel:
    """P(x, t) = 20 + 2t + (2x - 1)(2 + sin Z), x in [-2, 2]."""
    return FiniteFactorModel(
        mu=lambda t: 20.0 + 2.0 * t,
        mu_prime=lambda t: 2.0,
        sigma=lambda x: 2.0 * x - 1.0,
        h=lambda y: 2.0 + np.sin(y),
        x_min=-2.0, x_max=2.0)


def liquidation_proceeds(model: FiniteFactorModel, theta: float, t: float,
                         z_value: float) -> float:
    """Integral of the price curve over positions 0..theta (adaptive)."""
    if not model.x_min <= theta <= model.x_max:
        raise ConfigurationError(f"position {theta} outside the admissible range")
    if theta == 0.0:
        return 0.0
    val, err = quad(lambda x: model.price(x, t, z_value), 0.0, theta,
                    epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-7 * max(abs(val), 1.0):
        raise NumericalError(f"liquidation quadrature error estimate {err!r} too large")
    return float(val)


def simulate_z_paths(n_paths: int, n_steps: int, horizon: float, seed: int,
                     z_scale: float = 1.0) -> np.ndarray:
    """Noise paths Z(t_j) as a scaled random walk from unit-kernel field draws.

    Uses a one-band increment grid, so each path is a standard Brownian
    motion on the step grid (times z_scale); shape (n_paths, n_steps+1).
    """
    grid = GridSpec(n_factors=1, n_steps=n_steps, horizon=horizon)
    out = np.zeros((n_paths, n_steps + 1))
    for pid in range(n_paths):
        sheet = sample_sheet(grid, seed, pid)
        out[pid, 1:] = np.cumsum(sheet.values[0]) * z_scale
    return out


def wealth_path(model: FiniteFactorModel, z_path: np.ndarray,
                times: np.ndarray) -> np.ndarray:
    """Realizable-wealth increments of the constant buy strategy at x*.

    At x* the held block reprices deterministically, so each explicit
    Euler increment is L(x*, t_j) mu'(t_j) dt; the variation term of the
    strategy vanishes because the position never moves.  Returns
    V(t_j) - V(0) on the grid.
    """
    times = np.asarray(times, dtype=float)
    z_path = np.asarray(z_path, dtype=float)
    if z_path.shape != times.shape:
        raise ConfigurationError("noise path and time grid sizes differ")
    x_star = model.x_star()
    # L(x*, t, z) = mu(t) x* + h(z) * integral of sigma over 0..x*
    sigma_mass, _ = quad(model.sigma, 0.0, x_star, epsabs=1e-13, epsrel=1e-13)
    mu_vals = np.array([model.mu(t) for t in times[:-1]])
    mup_vals = np.array([model.mu_prime(t) for t in times[:-1]])
    h_vals = np.array([model.h(z) for z in z_path[:-1]])
    L_vals = mu_vals * x_star + h_vals * sigma_mass
    incr = L_vals * mup_vals * np.diff(times)
    out = np.zeros_like(times)
    out[1:] = np.cumsum(incr)
    return out


@dataclass
class ArbitrageReport:
    x_star: float = 0.0
    delta0: float = 0.0
    n_paths: int = 0
    n_steps: int = 0
    min_margin: float = np.inf
    per_path_min: np.ndarray = field(default_factory=lambda: np.empty(0))
    mu_increasing: bool = True
    delta0_nonneg: bool = True
    verdict: str = ""

    def lines(self) -> list[str]:
        return [
            f"x* (root of sigma):      {self.x_star!r}",
            f"delta0 (price floor):    {self.delta0!r}",
            f"paths x steps:           {self.n_paths} x {self.n_steps}",
            f"min wealth margin:       {self.min_margin!r}",
            f"mu increasing:           {self.mu_increasing}",
            f"delta0 non-negative:     {self.delta0_nonneg}",
            f"verdict:                 {self.verdict}",
        ]

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


@dataclass(frozen=True)
class DemoConfig:
    n_paths: int = 1000
    n_steps: int = 78
    horizon: float = 1.0
    seed: int = 7
    z_scale: float = 1.0


def run_demo(model: FiniteFactorModel | None = None,
             config: DemoConfig = DemoConfig()) -> ArbitrageReport:
    """Verify the strict wealth bound of the constant buy strategy.

    The margin checked at every grid time t > 0 on every path is
    V(t) - V(0) - x* delta0 (mu(t) - mu(0)); the verdict is positive
    only if its minimum is strictly positive, mu' stays positive on the
    grid and the price floor delta0 is non-negative.
    """
    if model is None:
        model = default_model()
    report = ArbitrageReport(n_paths=config.n_paths, n_steps=config.n_steps)
    report.x_star = model.x_star()
    report.delta0 = model.delta0()
    report.delta0_nonneg = report.delta0 >= 0.0
    times = np.linspace(0.0, config.horizon, config.n_steps + 1)
    mups = np.array([model.mu_prime(t) for t in times])
    report.mu_increasing = bool(np.all(mups > 0.0))

    z = simulate_z_paths(config.n_paths, config.n_steps, config.horizon,
                         config.seed, config.z_scale)
    mu_gain = np.array([model.mu(t) - model.mu(0.0) for t in times])
    bound = report.x_star * report.delta0 * mu_gain
    mins = np.empty(config.n_paths)
    for i in range(config.n_paths):
        v = wealth_path(model, z[i], times)
        mins[i] = float(np.min((v - bound)[1:]))
    report.per_path_min = mins
    report.min_margin = float(mins.min())
    if not report.delta0_nonneg:
        report.verdict = "precondition failed: price floor delta0 is negative"
    elif not report.mu_increasing:
        report.verdict = "bound fails: mu is not increasing on the grid"
    elif report.min_margin > 0.0:
        report.verdict = "arbitrage realized on all paths"
    else:
        report.verdict = "bound violated on some path"
    return report


def write_demo_csv(path, report: ArbitrageReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "min_wealth_margin"])
        for i, v in enumerate(report.per_path_min):
            w.writerow([i, repr(float(v))])
