"""Parameterized net-demand surface model, calibration and feasibility.

The surface is driven by a two-parameter Gaussian field through two
state families: a scalar state behind the level of net demand at price
zero and one state per price node behind the density,

    Q(0, t) = Q00 + F0(X0(t)),        X0(t)   = sum_k sQ0[k]  dB[k, 0..t]
    q(p, t) = q0(p) + F1(Xq_p(t)),    Xq_p(t) = sum_k R[p, k] dB[k, 0..t]
    Q(p, t) = Q(0, t) - integral_0^p q(x, t) dx   (cumulative trapezoid)

with the response functions F(x) = lo + (hi - lo) / (1 + x), which fall
from `hi` at x = 0 toward `lo` as x grows and keep the curve monotone in
price as long as the base density stays positive.  Band kernels are
piecewise constant: node 0 loads only on the lowest factor band (the
"head"), nodes 1..I-1 load on bands 1..I-1 through a square matrix, and
the top node carries no noise.

Drift and factor loadings of Q at the nodes follow from the chain rule:
loading  F'(X) * kernel, drift  (1/2) F''(X) * ||kernel||^2, accumulated
in price with the same cumulative trapezoid as the surface itself, so
the assembled quantities describe the simulated dynamics node by node.

Calibration is method-of-moments: invert F on the observed surface to
recover the states, then factor the sample covariance of their time
increments.  Because a single trading window has fewer increments than
price nodes, the covariance is shrunk toward its diagonal before the
Cholesky factorization; the diagonal, which carries the identified
per-node variances (the kernel row norms), is unchanged by the shrink.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (CalibrationError, ClearingError, ConfigurationError,
                     DataError, DimensionError, DomainError, NearFlatDemandError)
from .lob import DemandSurface
from .string_field import GridSpec

POLE_CLAMP = -1.0 + 1e-6


@dataclass(frozen=True)
class BoundedHyperbola:
    """The response family lo + (hi - lo)/(1 + x) on x > -1."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi):
            raise ConfigurationError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def _check(self, x):
        if np.any(np.asarray(x) <= -1.0):
            raise DomainError("argument at or below the pole x = -1")

    def value(self, x):
        self._check(x)
        return self.lo + self.span / (1.0 + np.asarray(x, dtype=float))

    def deriv(self, x):
        self._check(x)
        onepx = 1.0 + np.asarray(x, dtype=float)
        return -self.span / (onepx * onepx)

    def deriv2(self, x):
        self._check(x)
        onepx = 1.0 + np.asarray(x, dtype=float)
        return 2.0 * self.span / (onepx * onepx * onepx)

    def inverse(self, y):
        """Solve value(x) = y for x; needs y > lo (and span > 0)."""
        y = np.asarray(y, dtype=float)
        if self.span <= 0.0:
            raise DomainError("inverse undefined for a degenerate (flat) response")
        if np.any(y <= self.lo):
            raise DomainError("inverse argument at or below the lower bound")
        return self.span / (y - self.lo) - 1.0


def clamp_pole(x):
    """Clamp state arguments away from the response pole; count clamps."""
    x = np.asarray(x, dtype=float)
    n = int(np.count_nonzero(x < POLE_CLAMP))
    return (np.maximum(x, POLE_CLAMP), n)


def cumtrapz_price(y: np.ndarray, dp: float, axis: int = 0) -> np.ndarray:
    """Cumulative trapezoid along the price axis, starting at zero."""
    ym = np.moveaxis(np.asarray(y, dtype=float), axis, 0)
    out = np.zeros_like(ym)
    np.cumsum(0.5 * dp * (ym[1:] + ym[:-1]), axis=0, out=out[1:])
    return np.moveaxis(out, 0, axis)


def fd_gradient(y: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    """Central differences inside, one-sided (second order) at the boundaries."""
    y = np.asarray(y, dtype=float)
    order = 2 if y.shape[axis] >= 3 else 1
    return np.gradient(y, dx, axis=axis, edge_order=order)


def fd_second(y: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    """Second differences: three-point central inside, four-point
    one-sided (second order) at the boundaries."""
    y = np.moveaxis(np.asarray(y, dtype=float), axis, 0)
    out = np.empty_like(y)
    n = y.shape[0]
    if n < 3:
        out[:] = 0.0
        return np.moveaxis(out, 0, axis)
    h2 = dx * dx
    out[1:-1] = (y[2:] - 2.0 * y[1:-1] + y[:-2]) / h2
    if n >= 4:
        out[0] = (2.0 * y[0] - 5.0 * y[1] + 4.0 * y[2] - y[3]) / h2
        out[-1] = (2.0 * y[-1] - 5.0 * y[-2] + 4.0 * y[-3] - y[-4]) / h2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


@dataclass(frozen=True)
class ModelParams:
    """Calibrated model: bounds, base curves, kernels and the grid."""

    S: float
    eps: float
    x_min: float
    x_max: float
    d0_min: float
    d0_max: float
    d1_min: float
    d1_max: float
    Q00: float
    q0: np.ndarray               # (I+1,) base density at price nodes
    sigbar_Q0: np.ndarray        # (I,)  level-state kernel over bands
    sigbar_q_head: np.ndarray    # (I+1,) lowest-band density kernel per node
    sigbar_q: np.ndarray         # (I-1, I-1) density kernels, nodes x bands 1..I-1
    grid: GridSpec
    dp: float

    def __post_init__(self):
        n = self.grid.n_factors
        arrays = {"q0": (n + 1,), "sigbar_Q0": (n,),
                  "sigbar_q_head": (n + 1,), "sigbar_q": (n - 1, n - 1)}
        for name, shape in arrays.items():
            a = np.ascontiguousarray(getattr(self, name), dtype=float)
            if a.shape != shape:
                raise DimensionError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ConfigurationError(f"{name} contains non-finite entries")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if not (0.0 < self.d0_min <= self.d0_max):
            raise ConfigurationError("need 0 < d0_min <= d0_max")
        if not (0.0 <= self.d1_min <= self.d1_max):
            raise ConfigurationError("need 0 <= d1_min <= d1_max")
        if not (0.0 < self.eps < 1.0):
            raise ConfigurationError(f"eps must lie in (0, 1), got {self.eps}")
        if self.x_min >= self.x_max:
            raise ConfigurationError("need x_min < x_max")
        if abs(self.dp * self.grid.n_factors - self.S) > 1e-6 * max(self.S, 1.0):
            raise ConfigurationError("price step dp must equal S / n_factors")
        if abs(self.eps * self.S - self.dp) > 1e-6 * max(self.S, 1.0):
            raise ConfigurationError("lowest interior node must sit at eps * S")
        if np.any(np.abs(self.sigbar_q_head[1:]) > 0.0):
            raise ConfigurationError(
                "density head kernel must vanish at and above the eps*S node")
        rows = np.zeros((n + 1, n))
        rows[0, 0] = self.sigbar_q_head[0]
        rows[1:n, 1:] = self.sigbar_q
        rows.flags.writeable = False
        object.__setattr__(self, "_rows", rows)

    @property
    def n_price(self) -> int:
        return self.grid.n_factors

    @property
    def f0(self) -> BoundedHyperbola:
        return BoundedHyperbola(self.d0_min, self.d0_max)

    @property
    def f1(self) -> BoundedHyperbola:
        return BoundedHyperbola(self.d1_min, self.d1_max)

    def price_nodes(self) -> np.ndarray:
        return np.arange(self.n_price + 1) * self.dp

    def kernel_rows(self) -> np.ndarray:
        """Density kernel per price node over all bands, shape (I+1, I)."""
        return self._rows

    def row_variances(self) -> np.ndarray:
        """||kernel row||^2 * ds per node (the per-unit-time state variances)."""
        r = self.kernel_rows()
        return np.einsum("ik,ik->i", r, r) * self.grid.ds

    def level_variance(self) -> float:
        return float(self.sigbar_Q0 @ self.sigbar_Q0) * self.grid.ds


@dataclass
class ModelState:
    """Gaussian state behind one surface; arrays may carry a path axis."""

    x0: float | np.ndarray
    xq: np.ndarray
    t: float = 0.0

    @classmethod
    def initial(cls, params: ModelParams, n_paths: int | None = None) -> "ModelState":
        if n_paths is None:
            return cls(0.0, np.zeros(params.n_price + 1), 0.0)
        return cls(np.zeros(n_paths), np.zeros((params.n_price + 1, n_paths)), 0.0)


@dataclass(frozen=True)
class PriceCoefficients:
    """Drift, diffusion scale and factor loadings of the price at one position."""

    mu_P: float
    sigma_P: float
    b_P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b_P", np.asarray(self.b_P, dtype=float))


def surface_from_state(state: ModelState, params: ModelParams):
    """Evaluate (Q, q) at the price nodes for the given state.

    Pole-adjacent state entries are clamped just above -1; the count is
    available through :func:`clamp_pole` for callers that track it.
    """
    x0c, _ = clamp_pole(state.x0)
    xqc, _ = clamp_pole(state.xq)
    q = params.f1.value(xqc)
    q = params.q0.reshape((-1,) + (1,) * (q.ndim - 1)) + q
    Q0 = params.Q00 + params.f0.value(x0c)
    Q = Q0 - cumtrapz_price(q, params.dp, axis=0)
    return Q, q


def drift_diffusion(state: ModelState, params: ModelParams):
    """Per-unit-time drift and band loadings of Q at every price node.

    Returns (mu_Q, sigtilde) with shapes (I+1, ...) and (I+1, I, ...).
    Price accumulation uses the same cumulative trapezoid as the surface
    itself, so these are exactly the loadings and drift of the simulated
    Q values; in particular differencing consecutive rows of `sigtilde`
    yields the trapezoid pair of adjacent kernel rows, which is what the
    risk-price solver eliminates.
    """
    x0c, _ = clamp_pole(state.x0)
    xqc, _ = clamp_pole(state.xq)
    f0, f1 = params.f0, params.f1
    rows = params.kernel_rows()                      # (I+1, I)
    h1 = f1.deriv(xqc)                               # (I+1, ...)
    batch = h1.ndim - 1

    rows_b = rows.reshape(rows.shape + (1,) * batch)
    loadings = h1[:, None] * rows_b                  # (I+1, I, ...)
    acc = cumtrapz_price(loadings, params.dp, axis=0)
    h0 = np.asarray(f0.deriv(x0c), dtype=float)
    sigtilde = h0 * params.sigbar_Q0.reshape((-1,) + (1,) * batch) - acc

    row_var = params.row_variances().reshape((-1,) + (1,) * batch)
    ito_q = 0.5 * f1.deriv2(xqc) * row_var           # (I+1, ...)
    acc_mu = cumtrapz_price(ito_q, params.dp, axis=0)
    mu_Q = 0.5 * np.asarray(f0.deriv2(x0c), dtype=float) * params.level_variance() - acc_mu
    return mu_Q, sigtilde


def interp_at_price(values: np.ndarray, prices: np.ndarray, p: float):
    """Linear interpolation of node values (first axis is price)."""
    i = int(np.clip(np.searchsorted(prices, p) - 1, 0, prices.size - 2))
    w = (p - prices[i]) / (prices[i + 1] - prices[i])
    return (1.0 - w) * values[i] + w * values[i + 1]


def clearing_price(Q_column: np.ndarray, prices: np.ndarray, x: float = 0.0):
    """Price where Q + x crosses zero, by linear interpolation.

    Multiple sign changes (numerical non-monotonicity) resolve to the
    lowest-price bracket and are flagged in the second return value.
    """
    g = np.asarray(Q_column, dtype=float) + x
    if not (g[0] >= 0.0 >= g[-1]):
        raise ClearingError(
            f"net demand plus position {x} has no sign change on the grid "
            f"(ends {g[0]:.6g}, {g[-1]:.6g})")
    neg = np.nonzero(g < 0.0)[0]
    if neg.size == 0:
        return float(prices[-1]), False
    j = int(neg[0])
    if j == 0:
        return float(prices[0]), False
    flagged = bool(np.any(np.diff(np.signbit(g)[j:])))
    denom = g[j - 1] - g[j]
    if denom <= 0.0:
        return float(prices[j]), True
    w = g[j - 1] / denom
    return float(prices[j - 1] + w * (prices[j] - prices[j - 1])), flagged


def price_coefficients(Q_column: np.ndarray, mu_Q: np.ndarray,
                       sigtilde: np.ndarray, x: float,
                       params: ModelParams) -> PriceCoefficients:
    """Drift, diffusion and loadings of the price process at position x.

    All node quantities (including the finite-difference price
    derivatives of Q and of the loadings) are interpolated linearly at
    the clearing price, matching the clearing interpolation itself.
    """
    prices = params.price_nodes()
    ds = params.grid.ds
    p_clear, _ = clearing_price(Q_column, prices, x)

    Qp = fd_gradient(Q_column, params.dp, axis=0)
    Qpp = fd_second(Q_column, params.dp, axis=0)
    dsig = fd_gradient(sigtilde, params.dp, axis=0)

    Qp_at = float(interp_at_price(Qp, prices, p_clear))
    if Qp_at >= 0.0:
        raise NearFlatDemandError(
            f"demand slope {Qp_at:.6g} is not negative at the clearing price")
    Qpp_at = float(interp_at_price(Qpp, prices, p_clear))
    mu_at = float(interp_at_price(mu_Q, prices, p_clear))
    sig_at = interp_at_price(sigtilde, prices, p_clear)
    dsig_at = interp_at_price(dsig, prices, p_clear)
    # level-dependence term evaluated from the interpolated ingredients, so
    # the returned coefficients zero the composite expansion term by term
    C_at = -float(np.sum(dsig_at * sig_at)) * ds / Qp_at

    sigma_Q = float(np.sqrt(np.sum(sig_at * sig_at) * ds))
    sigma_P = sigma_Q / Qp_at
    b_P = np.zeros_like(sig_at) if sigma_Q == 0.0 else -sig_at / sigma_Q
    mu_P = -(mu_at + 0.5 * Qpp_at * sigma_P * sigma_P + C_at) / Qp_at
    return PriceCoefficients(mu_P, sigma_P, b_P)


@dataclass(frozen=True)
class FeasibilityReport:
    d1_min_lower: float
    d1_max_upper: float
    eps_upper: float
    checks: dict
    feasible: bool

    def lines(self) -> list[str]:
        out = [f"d1_min lower bound: {self.d1_min_lower!r}",
               f"d1_max upper bound: {self.d1_max_upper!r}",
               f"eps upper bound:    {self.eps_upper!r}"]
        out += [f"check {k}: {'ok' if v else 'FAIL'}" for k, v in self.checks.items()]
        out.append(f"feasible: {self.feasible}")
        return out


def feasibility_bounds(S: float, eps: float, x_min: float, x_max: float,
                       d0_min: float, d0_max: float, Q00: float,
                       q0: np.ndarray, dp: float,
                       d1_min: float | None = None,
                       d1_max: float | None = None) -> FeasibilityReport:
    """Clearing-band feasibility of the parameter set.

    Evaluates the sufficient conditions keeping the clearing price inside
    [eps*S, S] for every admissible position: the bounds on d1_min,
    d1_max and eps, plus the direct inequalities when candidate d1
    values are supplied.  Infeasibility is reported, never raised.
    """
    q0 = np.asarray(q0, dtype=float)
    prices = np.arange(q0.size) * dp
    int_q0_S = float(np.trapezoid(q0, prices))
    n_eps = int(round(eps * S / dp))
    int_q0_eps = float(np.trapezoid(q0[:n_eps + 1], prices[:n_eps + 1]))

    d1_min_lower = (x_max + Q00 + d0_max - int_q0_S) / S
    d1_max_upper = (x_min + Q00 - int_q0_eps) / (eps * S)
    denom = x_max + Q00 + d0_max - int_q0_S
    numer = x_min + Q00 - int_q0_eps
    eps_upper = numer / denom if denom > 0.0 else np.inf

    checks = {
        "d0_order": 0.0 < d0_min <= d0_max,
    }
    if d1_min is not None and d1_max is not None:
        checks["d1_order"] = d1_min < d1_max
        checks["MC_hold"] = Q00 + d0_max - int_q0_S - d1_min * S + x_max <= 0.0
        checks["Bound_hold"] = Q00 - int_q0_eps - d1_max * eps * S + x_min >= 0.0
    else:
        checks["d1_bounds_compatible"] = max(d1_min_lower, 0.0) < d1_max_upper
    feasible = all(checks.values())
    # informational only: sufficient conditions for the existence of some
    # feasible eps, not binding once a concrete eps passes the direct checks
    checks["d0_max_margin (info)"] = d0_max > x_min - x_max + int_q0_S
    checks["eps_below_bound (info)"] = 0.0 < eps < 1.0 and eps < eps_upper
    return FeasibilityReport(d1_min_lower, d1_max_upper, eps_upper, checks, feasible)


def check_feasibility(params: ModelParams) -> FeasibilityReport:
    return feasibility_bounds(params.S, params.eps, params.x_min, params.x_max,
                              params.d0_min, params.d0_max, params.Q00, params.q0,
                              params.dp, d1_min=params.d1_min, d1_max=params.d1_max)


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings for method-of-moments calibration.

    Response bounds and trader-position limits may be pinned explicitly
    (required for round-trip experiments); otherwise they are chosen
    from the observed surface with the margins below.
    """

    horizon: float = 1.0
    eps: float | None = None               # default: one price step
    d0_min: float | None = None
    d0_max: float | None = None
    d1_min: float | None = None
    d1_max: float | None = None
    x_min: float | None = None
    x_max: float | None = None
    range_multiple: float = 8.0            # response span per observed swing
    d1_min_floor: float = 1e-4             # fraction of the d1 span
    position_fraction: float = 0.25        # of the available clearing margin
    ridge: float = 1e-10                   # of mean diagonal, for factorability
    shrinkage: float | None = None         # None: set from sample count
    min_span_floor: float = 1e-12


@dataclass
class CalibrationReport:
    n_surfaces: int = 0
    n_increments: int = 0
    shrinkage: float = 0.0
    ridge_applied: float = 0.0
    level_swing: float = 0.0
    density_swing: float = 0.0
    inversion_clamps: int = 0
    q0_min: float = 0.0
    degenerate_level: bool = False
    degenerate_density: bool = False
    d1_min_strictness: bool = True
    feasibility: FeasibilityReport | None = None

    def lines(self) -> list[str]:
        out = [
            f"surfaces pooled:    {self.n_surfaces}",
            f"increments used:    {self.n_increments}",
            f"covariance shrink:  {self.shrinkage!r}",
            f"ridge applied:      {self.ridge_applied!r}",
            f"level swing:        {self.level_swing!r}",
            f"density swing:      {self.density_swing!r}",
            f"inversion clamps:   {self.inversion_clamps}",
            f"base density min:   {self.q0_min!r}",
            f"degenerate level:   {self.degenerate_level}",
            f"degenerate density: {self.degenerate_density}",
            f"d1_min strictly positive: {self.d1_min_strictness}",
        ]
        if self.feasibility is not None:
            out.append("feasibility:")
            out += ["  " + ln for ln in self.feasibility.lines()]
        return out


def _pooled_increments(values: np.ndarray) -> np.ndarray:
    """Time increments along the last axis."""
    return np.diff(values, axis=-1)


def _invert_response(f: BoundedHyperbola, offsets: np.ndarray):
    """State values from observed response offsets F(x) - F(0); counts clamps."""
    span = f.span
    denom = span + offsets
    floor = 1e-9 * max(span, 1.0)
    clamped = int(np.count_nonzero(denom <= floor))
    denom = np.maximum(denom, floor)
    return -offsets / denom, clamped


def calibrate(surfaces: DemandSurface | Sequence[DemandSurface],
              config: CalibrationConfig = CalibrationConfig()):
    """Method-of-moments calibration; returns (ModelParams, CalibrationReport).

    Accepts one surface or several (e.g. consecutive sessions); state
    increments are pooled across surfaces.  All surfaces must share the
    price grid, which must start at zero so the band structure lines up
    with the clearing band [eps*S, S].
    """
    if isinstance(surfaces, DemandSurface):
        surfaces = [surfaces]
    if not surfaces:
        raise CalibrationError("no surfaces supplied")
    ref = surfaces[0]
    prices = ref.prices
    if abs(prices[0]) > 1e-9 * max(prices[-1], 1.0):
        raise ConfigurationError("calibration grid must start at price zero")
    for s in surfaces[1:]:
        if s.prices.shape != prices.shape or not np.allclose(s.prices, prices):
            raise ConfigurationError("all surfaces must share one price grid")
    n_p = prices.size - 1
    if n_p < 3:
        raise ConfigurationError("need at least 3 price steps")
    S = float(prices[-1])
    dp = float(ref.dp)
    eps = config.eps if config.eps is not None else dp / S
    J = ref.times.size - 1
    grid = GridSpec(n_factors=n_p, n_steps=J, horizon=config.horizon)
    report = CalibrationReport(n_surfaces=len(surfaces))

    Q0_rows = np.stack([s.Q[0, :] for s in surfaces])        # (n_surf, J+1)
    q_cube = np.stack([s.q for s in surfaces])               # (n_surf, I+1, J+1)

    level_off = Q0_rows - Q0_rows[:, :1]
    dens_off = q_cube - q_cube[:, :, :1]
    report.level_swing = float(np.max(np.abs(level_off), initial=0.0))
    report.density_swing = float(np.max(np.abs(dens_off), initial=0.0))
    report.degenerate_level = report.level_swing <= config.min_span_floor
    report.degenerate_density = report.density_swing <= config.min_span_floor

    if config.d0_max is not None and config.d0_min is not None:
        d0_min, d0_max = config.d0_min, config.d0_max
    else:
        span0 = config.range_multiple * max(report.level_swing, config.min_span_floor)
        d0_min = 0.004 * span0
        d0_max = d0_min + span0
    if config.d1_max is not None and config.d1_min is not None:
        d1_min, d1_max = config.d1_min, config.d1_max
    else:
        span1 = config.range_multiple * max(report.density_swing, config.min_span_floor)
        d1_min = config.d1_min_floor * span1
        d1_max = d1_min + span1
    report.d1_min_strictness = d1_min > 0.0

    Q00 = float(Q0_rows[0, 0]) - d0_max
    q0 = ref.q[:, 0] - d1_max
    report.q0_min = float(q0.min())

    if config.x_min is not None and config.x_max is not None:
        x_min, x_max = config.x_min, config.x_max
    else:
        int_q0_S = float(np.trapezoid(q0, prices))
        n_eps = int(round(eps * S / dp))
        int_q0_eps = float(np.trapezoid(q0[:n_eps + 1], prices[:n_eps + 1]))
        mc_room = -(Q00 + d0_max - int_q0_S - d1_min * S)
        bound_room = Q00 - int_q0_eps - d1_max * eps * S
        x_max = config.position_fraction * max(mc_room, config.min_span_floor)
        x_min = -config.position_fraction * max(bound_room, config.min_span_floor)

    f0 = BoundedHyperbola(d0_min, d0_max)
    f1 = BoundedHyperbola(d1_min, d1_max)
    x0_states, c0 = _invert_response(f0, level_off)
    xq_states, c1 = _invert_response(f1, dens_off)
    report.inversion_clamps = c0 + c1

    dx0 = _pooled_increments(x0_states).reshape(-1)          # (n_surf * J,)
    dxq = _pooled_increments(xq_states)                      # (n_surf, I+1, J)
    dxq = np.concatenate([d for d in dxq], axis=-1)          # (I+1, n_surf * J)
    report.n_increments = dx0.size
    if dx0.size < 2:
        raise CalibrationError("need at least two time steps to form increments")

    cell = grid.cell_var
    var0 = float(np.var(dx0, ddof=1))
    sigbar_Q0 = np.zeros(n_p)
    # the level kernel is identified only through its norm; placing it on
    # the head band with a negative sign keeps the low-band denominator of
    # the risk-price solve positive for every reachable state
    sigbar_Q0[0] = -np.sqrt(max(var0, 0.0) / cell)

    head = np.zeros(n_p + 1)
    head[0] = np.sqrt(max(float(np.var(dxq[0], ddof=1)), 0.0) / cell)

    core = dxq[1:n_p]                                        # nodes 1..I-1
    n_rows = core.shape[0]
    cov = np.cov(core, ddof=1) if core.shape[1] > 1 else np.zeros((n_rows, n_rows))
    cov = np.atleast_2d(cov)
    if config.shrinkage is not None:
        w = config.shrinkage
    else:
        w = float(np.clip(1.0 - core.shape[1] / (2.0 * n_rows), 0.05, 0.95))
    report.shrinkage = w
    diag = np.diag(np.diag(cov))
    work = (1.0 - w) * cov + w * diag
    mean_diag = float(np.trace(work)) / max(n_rows, 1)
    ridge = config.ridge * max(mean_diag, config.min_span_floor)
    report.ridge_applied = ridge
    work = work + ridge * np.eye(n_rows)
    try:
        M = np.linalg.cholesky(work / cell)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(
            "sample covariance is not positive definite after "
            f"regularization: {exc}") from exc

    params = ModelParams(S=S, eps=eps, x_min=x_min, x_max=x_max,
                         d0_min=d0_min, d0_max=d0_max,
                         d1_min=d1_min, d1_max=d1_max,
                         Q00=Q00, q0=q0, sigbar_Q0=sigbar_Q0,
                         sigbar_q_head=head, sigbar_q=M, grid=grid, dp=dp)
    report.feasibility = check_feasibility(params)
    return params, report


def save_params(path, params: ModelParams, report: CalibrationReport | None = None) -> None:
    """Write the parameter file: key/value scalars plus CSV matrix blocks."""
    def row(a):
        return ",".join(repr(float(v)) for v in np.asarray(a).ravel())

    with open(path, "w") as fh:
        fh.write("[scalars]\n")
        for name in ("S", "eps", "x_min", "x_max", "d0_min", "d0_max",
                     "d1_min", "d1_max", "Q00", "dp"):
            fh.write(f"{name} = {getattr(params, name)!r}\n")
        fh.write(f"n_factors = {params.grid.n_factors}\n")
        fh.write(f"n_steps = {params.grid.n_steps}\n")
        fh.write(f"horizon = {params.grid.horizon!r}\n")
        fh.write("\n[q0]\n" + row(params.q0) + "\n")
        fh.write("\n[sigbar_Q0]\n" + row(params.sigbar_Q0) + "\n")
        fh.write("\n[sigbar_q_head]\n" + row(params.sigbar_q_head) + "\n")
        fh.write("\n[sigbar_q]\n")
        for r in params.sigbar_q:
            fh.write(row(r) + "\n")
        if report is not None:
            fh.write("\n[diagnostics]\n")
            for ln in report.lines():
                fh.write("# " + ln + "\n")


def load_params(path) -> ModelParams:
    sections: dict[str, list[str]] = {}
    current = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
    try:
        scalars = dict(ln.split("=", 1) for ln in sections["scalars"])
        scalars = {k.strip(): v.strip() for k, v in scalars.items()}
        grid = GridSpec(int(scalars["n_factors"]), int(scalars["n_steps"]),
                        float(scalars["horizon"]))

        def arr(name):
            return np.array([[float(v) for v in ln.split(",")]
                             for ln in sections[name]])

        return ModelParams(
            S=float(scalars["S"]), eps=float(scalars["eps"]),
            x_min=float(scalars["x_min"]), x_max=float(scalars["x_max"]),
            d0_min=float(scalars["d0_min"]), d0_max=float(scalars["d0_max"]),
            d1_min=float(scalars["d1_min"]), d1_max=float(scalars["d1_max"]),
            Q00=float(scalars["Q00"]), q0=arr("q0").ravel(),
            sigbar_Q0=arr("sigbar_Q0").ravel(),
            sigbar_q_head=arr("sigbar_q_head").ravel(),
            sigbar_q=arr("sigbar_q"), grid=grid, dp=float(scalars["dp"]))
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"malformed parameter file {path}: {exc}") from exc
