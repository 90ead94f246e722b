"""Market-price-of-risk solvers: the discrete system and analytic families.

The equivalent-measure condition asks for a band function lambda with

    sum_k sigtilde_Q(p, s_k) lambda(s_k) ds = A(p)      on p in [eps*S, S],

where A collects the drift, convexity and level-dependence terms of the
net-demand dynamics.  On the grid the system is solved in two stages
that mirror its structure: differencing consecutive price nodes
eliminates both the level kernel and the head band (whose loadings are
constant in p), leaving a bidiagonal recursion in the per-node kernel
sums u_i = sum_k M[i,k] lambda_k followed by one back-substitution
against the constant node-kernel matrix M, whose factorization is
computed once and shared across all paths and steps.  The head-band
value then closes the undifferenced equation at the lowest clearing
node; its denominator must stay above a positivity floor.

Because the differencing is the exact difference of the assembled
loadings, the solved lambda zeroes the demand-format residual at every
node up to rounding; `mpr_residual` provides that check independently
of the solver.

Three closed-form constructions (price-linear demand, separated demand,
and a lognormal price-density model solved by marching a Volterra
system across factor bands) serve as oracles for the discrete solver.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .demand_model import fd_gradient, fd_second
from .errors import (ConfigurationError, DimensionError, InapplicabilityError,
                     InversionError, NearFlatDemandError, PositivityError,
                     SolverError)


@dataclass(frozen=True)
class MprInputs:
    """One time-step instance of the discrete risk-price system."""

    A: np.ndarray               # (I+1,) drift functional at the price nodes
    h1: np.ndarray              # (I+1,) density response slopes F1'(state)
    sigbar_q: np.ndarray        # (I-1, I-1) node kernels over bands 1..I-1
    sigtilde_low: np.ndarray    # (I,) loadings of Q at the eps*S node
    ds: float
    dp: float


class KernelFactorization:
    """LU factorization of the node-kernel matrix, shared across solves.

    The back-substitution is serialized behind a lock: the LAPACK solve
    wrapper is not safe under concurrent calls, and the call is cheap
    relative to the surrounding assembly work, so contention is moot.
    """

    def __init__(self, sigbar_q: np.ndarray):
        m = np.asarray(sigbar_q, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"kernel matrix must be square, got {m.shape}")
        try:
            self.lu, self.piv = lu_factor(m)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"kernel matrix factorization failed: {exc}") from exc
        if np.any(np.abs(np.diag(self.lu)) < np.finfo(float).eps * max(
                1.0, float(np.abs(m).max()))):
            raise SolverError("kernel matrix is numerically singular")
        self.matrix = m
        self._lock = threading.Lock()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        with self._lock:
            return lu_solve((self.lu, self.piv), rhs)


def compute_A(Q: np.ndarray, mu_Q: np.ndarray, sigtilde: np.ndarray,
              dp: float, ds: float, qp_floor: float = 1e-12) -> np.ndarray:
    """Drift functional A = mu_Q + (1/2) Q_pp (sigma_Q / Q_p)^2 + C per node.

    C is the level-dependence term -(1/Q_p) sum_k (d sigtilde/dp) sigtilde ds.
    Price derivatives are finite differences on the node grid.  Arrays may
    carry trailing batch axes; shapes are (I+1, ...) and (I+1, I, ...).
    """
    Q = np.asarray(Q, dtype=float)
    Qp = fd_gradient(Q, dp, axis=0)
    interior = Qp[1:]
    if np.any(interior >= -qp_floor):
        flat = np.argwhere(interior >= -qp_floor)
        node = int(flat[0][0]) + 1
        raise NearFlatDemandError(
            f"demand slope above -{qp_floor:g} at price node {node}")
    Qpp = fd_second(Q, dp, axis=0)
    dsig = fd_gradient(sigtilde, dp, axis=0)
    s2 = np.einsum("ik...,ik...->i...", sigtilde, sigtilde) * ds
    C = -np.einsum("ik...,ik...->i...", dsig, sigtilde) * ds / Qp
    return mu_Q + 0.5 * Qpp * s2 / (Qp * Qp) + C


def _difference_rhs(A: np.ndarray, h1: np.ndarray, dp: float, ds: float,
                    h1_floor: float) -> np.ndarray:
    """Backward recursion for the per-node kernel sums u_1..u_{I-1}.

    Differencing the node equations gives, for i = 1..I-1,

        (dp/2) (h1_i u_i + h1_{i+1} u_{i+1}) ds = A_i - A_{i+1},

    with u_I = 0 since the top node carries no kernel; solving backward
    is an O(I) sweep.  Supports a trailing batch axis.
    """
    if np.any(np.abs(h1[1:]) < h1_floor):
        raise SolverError(
            f"density response slope below the floor {h1_floor:g}; "
            "the differenced system cannot be divided through")
    n = A.shape[0] - 1
    g = 2.0 * (A[1:n] - A[2:n + 1]) / (dp * ds)
    u = np.zeros_like(A[1:n])
    carry = np.zeros_like(A[0])
    for m in range(n - 1, 0, -1):
        u[m - 1] = (g[m - 1] - carry) / h1[m]
        carry = h1[m] * u[m - 1]
    return u


def solve_mpr_step(inputs: MprInputs,
                   factorization: KernelFactorization | None = None,
                   eta_floor: float = 1e-8,
                   h1_floor: float = 1e-12) -> np.ndarray:
    """Solve one time step for the band values lambda_0..lambda_{I-1}.

    Bands 1..I-1 come from the differenced system against the constant
    kernel matrix (with one round of iterative refinement if the solve
    residual exceeds 1e-10 relative); the head band closes the full
    equation at the lowest clearing node, whose denominator must stay
    at or above `eta_floor`.
    """
    A = np.asarray(inputs.A, dtype=float)
    h1 = np.asarray(inputs.h1, dtype=float)
    if factorization is None:
        factorization = KernelFactorization(inputs.sigbar_q)
    u = _difference_rhs(A, h1, inputs.dp, inputs.ds, h1_floor)
    lam_rest = factorization.solve(u)
    resid = factorization.matrix @ lam_rest - u
    unorm = np.linalg.norm(u, axis=0)
    if np.any(np.linalg.norm(resid, axis=0) > 1e-10 * np.maximum(unorm, 1e-300)):
        lam_rest = lam_rest - factorization.solve(resid)
        resid = factorization.matrix @ lam_rest - u
        if np.any(np.linalg.norm(resid, axis=0) > 1e-10 * np.maximum(unorm, 1e-300)):
            raise SolverError("kernel system residual exceeds tolerance "
                              "after iterative refinement")
    low = np.asarray(inputs.sigtilde_low, dtype=float)
    denom = low[0] * inputs.ds
    if np.any(denom < eta_floor):
        raise PositivityError(
            f"head-band denominator {np.min(denom):.6g} below the positivity "
            f"floor {eta_floor:g}")
    lam0 = (A[1] - np.einsum("k...,k...->...", low[1:], lam_rest) * inputs.ds) / denom
    return np.concatenate([np.asarray(lam0)[None, ...], lam_rest], axis=0)


def mpr_residual(lam: np.ndarray, sigtilde: np.ndarray, A: np.ndarray,
                 ds: float) -> np.ndarray:
    """Independent check: sum_k sigtilde[p, k] lambda[k] ds - A[p] per row."""
    lam = np.asarray(lam, dtype=float)
    sigtilde = np.asarray(sigtilde, dtype=float)
    if sigtilde.shape[1] != lam.shape[0]:
        raise DimensionError(
            f"lambda has {lam.shape[0]} bands, loadings have {sigtilde.shape[1]}")
    return np.einsum("ik...,k...->i...", sigtilde, lam) * ds - np.asarray(A, dtype=float)


# --- analytic families -------------------------------------------------


@dataclass(frozen=True)
class LinearDemandModel:
    """Price-linear demand instance: curvature-free Q, p-proportional loadings.

    `sigtilde[i, k]` are the loadings at node i, `lambda_Q` the given
    drift-matching band function, and the hypotheses (zero price
    curvature of Q, loading slope proportional to the demand slope with
    a p-independent ratio h_Q, and mu_Q = sum_k sigtilde lambda_Q ds)
    are validated before the closed form is returned.
    """

    prices: np.ndarray
    Q: np.ndarray
    mu_Q: np.ndarray
    sigtilde: np.ndarray
    lambda_Q: np.ndarray
    ds: float
    tol: float = 1e-8


def lambda_linear(model: LinearDemandModel) -> np.ndarray:
    dp = float(model.prices[1] - model.prices[0])
    Qpp = fd_second(model.Q, dp, axis=0)
    if np.max(np.abs(Qpp)) * dp > model.tol * (1.0 + np.abs(model.Q).max()):
        raise InapplicabilityError("demand curve has price curvature")
    Qp = fd_gradient(model.Q, dp, axis=0)
    dsig = fd_gradient(model.sigtilde, dp, axis=0)
    h_rows = dsig / Qp[:, None]
    h_Q = h_rows.mean(axis=0)
    if np.max(np.abs(h_rows - h_Q[None, :])) > model.tol * (1.0 + np.abs(h_Q).max()):
        raise InapplicabilityError("loading slope ratio varies across prices")
    drift_fit = model.sigtilde @ model.lambda_Q * model.ds - model.mu_Q
    if np.max(np.abs(drift_fit)) > model.tol * (1.0 + np.abs(model.mu_Q).max()):
        raise InapplicabilityError("lambda_Q does not reproduce the drift")
    return model.lambda_Q - h_Q


@dataclass(frozen=True)
class SeparatedDemandModel:
    """Separated demand Q(p, t) = sigma(p) * F(state) with unit-norm band kernel."""

    prices: np.ndarray
    sigma: np.ndarray           # sigma(p) on the price grid, decreasing
    b: np.ndarray               # band kernel, sum b^2 ds = 1
    f: Callable[[float], float]
    f1: Callable[[float], float]
    f2: Callable[[float], float]
    state: float
    ds: float
    tol: float = 1e-6

    def h_values(self) -> tuple[float, float, float]:
        """(h0, h1, h2) = (F, F', F''/2) at the current state."""
        return (float(self.f(self.state)), float(self.f1(self.state)),
                0.5 * float(self.f2(self.state)))

    def sigma0(self) -> float:
        """The constant sigma'' sigma / sigma'^2 (validated)."""
        dp = float(self.prices[1] - self.prices[0])
        sp = fd_gradient(self.sigma, dp)
        spp = fd_second(self.sigma, dp)
        vals = spp * self.sigma / (sp * sp)
        # boundary second differences are first-order; judge constancy inside
        core = vals[1:-1]
        if core.size and np.max(np.abs(core - core.mean())) > self.tol * (
                1.0 + np.abs(core.mean())):
            raise InapplicabilityError(
                "sigma'' sigma / sigma'^2 is not constant in price")
        return float(core.mean()) if core.size else 0.0


def lambda_separated(model: SeparatedDemandModel) -> np.ndarray:
    norm = float(np.sum(model.b * model.b) * model.ds)
    if abs(norm - 1.0) > 1e-8:
        raise InapplicabilityError(f"band kernel norm {norm} differs from 1")
    h0, h1, h2 = model.h_values()
    if h0 == 0.0 or h1 == 0.0:
        raise InapplicabilityError("response level or slope vanishes")
    s0 = model.sigma0()
    return model.b * (h2 / h1 + h1 * s0 / (2.0 * h0) - h1 / h0)


@dataclass(frozen=True)
class LognormalModel:
    """Price-density model driven through a band-limited kernel.

    `sigbar(x, s)` must vanish above the scale boundary f(x), be bounded
    away from zero on it, vanish below eps for every x above x_min, and
    at x_min carry non-vanishing mass both below eps and on [eps, 2 eps).
    The factor grid must align eps with a whole number of bands.
    """

    eps: float
    x_min: float
    x_max: float
    p0: Callable
    mubar: Callable
    sigbar: Callable            # sigbar(x, s), vectorized in s
    n_bands: int

    def __post_init__(self):
        if not 0.0 < self.eps < 0.5:
            raise ConfigurationError(f"eps must lie in (0, 1/2), got {self.eps}")
        if self.x_min >= self.x_max:
            raise ConfigurationError("need x_min < x_max")
        n_e = self.eps * self.n_bands
        if abs(n_e - round(n_e)) > 1e-9 or round(n_e) < 1:
            raise ConfigurationError(
                "eps must align with a whole number of factor bands")
        if self.n_bands - 2 * round(n_e) < 1:
            raise ConfigurationError("grid too coarse: no bands above 2 eps")

    @property
    def ds(self) -> float:
        return 1.0 / self.n_bands

    @property
    def n_eps(self) -> int:
        return int(round(self.eps * self.n_bands))

    def scale(self, x):
        """Map positions to the factor coordinate: f(x) in [2 eps, 1]."""
        return 2.0 * self.eps + (1.0 - 2.0 * self.eps) * (
            np.asarray(x, dtype=float) - self.x_min) / (self.x_max - self.x_min)

    def scale_inv(self, s):
        return self.x_min + (np.asarray(s, dtype=float) - 2.0 * self.eps) * (
            self.x_max - self.x_min) / (1.0 - 2.0 * self.eps)

    def band_edges(self) -> np.ndarray:
        return np.arange(self.n_bands) * self.ds

    def x_nodes(self) -> np.ndarray:
        """March nodes: preimages of the band edges on [2 eps, 1]."""
        j = np.arange(self.n_bands - 2 * self.n_eps + 1)
        return self.scale_inv(2.0 * self.eps + j * self.ds)


def lambda_lognormal(model: LognormalModel, t: float = 0.0) -> np.ndarray:
    """Band values solving the price-format system for the lognormal model.

    Time enters only through the (deterministic) kernels here, so the
    result is time-independent; `t` is accepted for interface symmetry.
    Three stages: a constant value on [eps, 2 eps) from the equation at
    x_min, a Volterra march across [2 eps, 1] adding one band per
    position node, and a constant on [0, eps) closing the undifferenced
    equation at x_min.
    """
    ds = model.ds
    n_e = model.n_eps
    s = model.band_edges()
    lam = np.zeros(model.n_bands)

    k0 = np.asarray(model.sigbar(model.x_min, s[n_e:2 * n_e]), dtype=float)
    denom1 = float(np.sum(k0)) * ds
    if abs(denom1) < 1e-300:
        raise InversionError("kernel mass on [eps, 2 eps) vanishes at x_min")
    lam[n_e:2 * n_e] = float(model.mubar(model.x_min)) / denom1

    xs = model.x_nodes()
    for j in range(1, xs.size):
        x = float(xs[j])
        new = 2 * n_e + j - 1
        kern = np.asarray(model.sigbar(x, s[n_e:new + 1]), dtype=float)
        edge = kern[-1]
        if abs(edge) < 1e-300:
            raise InversionError(
                f"kernel vanishes on its support edge at position node {j}")
        known = float(np.sum(kern[:-1] * lam[n_e:new])) * ds
        lam[new] = (float(model.mubar(x)) - known) / (edge * ds)

    low = np.asarray(model.sigbar(model.x_min, s[:n_e]), dtype=float)
    denom0 = float(np.sum(low)) * ds
    if abs(denom0) < 1e-300:
        raise InversionError("kernel mass on [0, eps) vanishes at x_min")
    rest = np.asarray(model.sigbar(model.x_min, s[n_e:]), dtype=float)
    lam[:n_e] = (float(model.mubar(model.x_min))
                 - float(np.sum(rest * lam[n_e:])) * ds) / denom0
    return lam


def lognormal_price_residual(model: LognormalModel, lam: np.ndarray) -> np.ndarray:
    """Price-format residual at the march nodes, reassembled from raw grids.

    Loadings and drift of the price curve are rebuilt by trapezoid
    accumulation of the density kernels over positions (at the initial
    density, where the curve is deterministic), then contracted against
    lambda by the band rule.
    """
    s = model.band_edges()
    xs = model.x_nodes()
    ds = model.ds
    p0 = np.asarray([float(model.p0(x)) for x in xs])
    mub = np.asarray([float(model.mubar(x)) for x in xs])
    kern = np.asarray([np.asarray(model.sigbar(x, s), dtype=float) for x in xs])

    dx = np.diff(xs)
    weights = kern * p0[:, None]
    acc = np.zeros_like(weights)
    acc[1:] = np.cumsum(0.5 * dx[:, None] * (weights[1:] + weights[:-1]), axis=0)
    sig_P = weights[0][None, :] + acc

    drift = mub * p0
    acc_mu = np.zeros_like(drift)
    acc_mu[1:] = np.cumsum(0.5 * dx * (drift[1:] + drift[:-1]))
    mu_P = drift[0] + acc_mu
    return sig_P @ np.asarray(lam, dtype=float) * ds - mu_P


def write_lambda_csv(path, lam_by_step: np.ndarray, residual_summary=None) -> None:
    """Diagnostic CSV: t_index, band, lambda rows plus residual summary rows."""
    import csv

    lam_by_step = np.atleast_2d(np.asarray(lam_by_step, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_index", "band", "lambda"])
        for j, row in enumerate(lam_by_step):
            for k, v in enumerate(row):
                w.writerow([j, k, repr(float(v))])
        if residual_summary:
            for key, value in residual_summary.items():
                fh.write(f"# residual {key} = {value!r}\n")
