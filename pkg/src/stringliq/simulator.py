"""Euler evolution of the demand surface and clearing-price extraction.

Each path draws its own increment matrix from a counter-based stream,
steps the Gaussian states once per grid time, re-evaluates the surface
and reads the clearing price off the zero crossing of net demand.
Under the pricing measure the per-step risk prices are solved from the
current state and subtracted from the raw draws cell by cell before the
state update (the measure-change shift), so the same draws serve both
measures and a physical run coupled to a pricing run differs exactly by
those deterministic shifts.

Paths are processed in chunks vectorized across the path axis; chunks
are independent units of work that may run on a thread pool.  Surface
monotonicity, the density floor and the clearing-band inequalities are
checked on every step of every path and aggregated into the run report
rather than stored.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .demand_model import (POLE_CLAMP, ModelParams, ModelState, check_feasibility,
                           clamp_pole, cumtrapz_price, drift_diffusion, fd_gradient,
                           fd_second, surface_from_state)
from .errors import ClearingError, ConfigurationError, NearFlatDemandError
from .mpr import KernelFactorization, MprInputs, compute_A, mpr_residual, solve_mpr_step
from .string_field import standard_normal_matrix

PATHS_HEADER = ["path_id", "t_index", "pi"]


class Measure(str, Enum):
    PHYSICAL = "physical"
    RISK_NEUTRAL = "risk-neutral"


class _RnWorkspace:
    """Preallocated per-chunk buffers for the risk-neutral assembly.

    The cumulative loading tensor `acc[m, k, p]` (the price-integrated
    band loadings subtracted from the level kernel to form the Q
    loadings) is built in place by the trapezoid plane recursion, and
    every term of the drift functional is then a Gram contraction of
    `acc`, which avoids materializing gradient tensors on the hot path.
    """

    def __init__(self, n_price: int, n_paths: int):
        self.acc = np.zeros((n_price + 1, n_price, n_paths))
        self.plane = np.empty((n_price, n_paths))


def _assemble_rn_inputs(state: ModelState, Q: np.ndarray, params: ModelParams,
                        ws: _RnWorkspace, qp_floor: float, want_sigtilde: bool):
    """Fast batched equivalent of drift_diffusion + compute_A.

    Returns (A, h1, sigtilde_low, sigtilde-or-None).  Matches the
    reference ops exactly up to floating reassociation: the loading
    accumulator follows the same trapezoid recursion and the
    level-dependence term uses the same central/one-sided differences,
    expressed through adjacent-row Gram products.
    """
    f0, f1 = params.f0, params.f1
    dp, ds = params.dp, params.grid.ds
    rows = params.kernel_rows()
    x0c, xqc = state.x0, state.xq
    h0 = np.asarray(f0.deriv(x0c), dtype=float)
    h1 = f1.deriv(xqc)

    acc, plane = ws.acc, ws.plane
    prev = np.multiply(rows[0][:, None], h1[0], out=plane)
    acc[0] = 0.0
    half_dp = 0.5 * dp
    for m in range(1, rows.shape[0]):
        cur = rows[m][:, None] * h1[m]
        np.add(prev, cur, out=prev)
        prev *= half_dp
        np.add(acc[m - 1], prev, out=acc[m])
        prev = cur

    # Gram pieces of sigtilde = a - V with a = h0 * level kernel, V = acc
    a2 = float(params.sigbar_Q0 @ params.sigbar_Q0) * h0 * h0        # (...,)
    c1 = rows @ params.sigbar_Q0                                     # (I+1,)
    aV = h0 * cumtrapz_price(h1 * c1.reshape((-1,) + (1,) * (h1.ndim - 1)),
                             dp, axis=0)
    VV = np.einsum("ikp,ikp->ip", acc, acc)
    VV1 = np.einsum("ikp,ikp->ip", acc[1:], acc[:-1])
    s2raw = a2 - 2.0 * aV + VV                                       # sum_k sig^2
    cross = a2 - aV[1:] - aV[:-1] + VV1                              # adjacent rows

    # sum_k (d sigtilde/dp) sigtilde: central inside, second-order one-sided
    # stencils at the ends (skew Gram entries supply the two-apart products)
    dss = np.empty_like(s2raw)
    dss[1:-1] = (cross[1:] - cross[:-1]) / (2.0 * dp)
    skew_lo = a2 - aV[0] - aV[2] + np.einsum("kp,kp->p", acc[0], acc[2])
    skew_hi = a2 - aV[-3] - aV[-1] + np.einsum("kp,kp->p", acc[-3], acc[-1])
    dss[0] = (-3.0 * s2raw[0] + 4.0 * cross[0] - skew_lo) / (2.0 * dp)
    dss[-1] = (3.0 * s2raw[-1] - 4.0 * cross[-1] + skew_hi) / (2.0 * dp)

    row_var = params.row_variances().reshape((-1,) + (1,) * (h1.ndim - 1))
    ito_q = 0.5 * f1.deriv2(xqc) * row_var
    mu_Q = (0.5 * np.asarray(f0.deriv2(x0c), dtype=float) * params.level_variance()
            - cumtrapz_price(ito_q, dp, axis=0))

    Qp = fd_gradient(Q, dp, axis=0)
    if np.any(Qp[1:] >= -qp_floor):
        node = int(np.argwhere(Qp[1:] >= -qp_floor)[0][0]) + 1
        raise NearFlatDemandError(
            f"demand slope above -{qp_floor:g} at price node {node}")
    Qpp = fd_second(Q, dp, axis=0)
    A = mu_Q + 0.5 * Qpp * (s2raw * ds) / (Qp * Qp) - dss * ds / Qp

    sig_low = h0 * params.sigbar_Q0[:, None] - acc[1]
    sigtilde = (h0 * params.sigbar_Q0[:, None] - acc) if want_sigtilde else None
    return A, h1, sig_low, sigtilde


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    seed: int = 0
    measure: Measure = Measure.RISK_NEUTRAL
    record_surfaces: bool = False
    record_lambda: bool = False
    compute_residuals: bool = False
    track_positions: tuple[float, ...] = ()
    chunk_size: int = 256
    threads: int = 1
    eta_floor: float = 1e-8
    h1_floor: float = 1e-12
    qp_floor: float = 1e-12
    freeze_lambda: bool = False
    strict_bounds: bool = False
    mono_tol_frac: float = 1e-9

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigurationError("need at least one path")
        if self.chunk_size < 1 or self.threads < 1:
            raise ConfigurationError("chunk size and thread count must be positive")


@dataclass
class PathResult:
    path_id: int
    pi: np.ndarray
    clamps: int = 0
    tracked: dict = field(default_factory=dict)
    surfaces: list | None = None
    lambda_trace: np.ndarray | None = None
    failed: bool = False
    fail_step: int = -1


@dataclass
class RunReport:
    measure: str = ""
    n_paths: int = 0
    n_steps: int = 0
    seed: int = 0
    clamp_events: int = 0
    clearing_failures: int = 0
    degenerate_paths: int = 0
    interp_flags: int = 0
    mono_violations: int = 0
    qfloor_violations: int = 0
    bound_violations: int = 0
    mc_violations: int = 0
    min_bound_margin: float = np.inf
    min_mc_margin: float = np.inf
    max_abs_lambda: float = 0.0
    max_lambda_mass: float = 0.0       # per-path sum of lambda^2 ds dt
    max_scaled_residual: float = 0.0
    runtime_s: float = 0.0
    feasibility_ok: bool | None = None

    def lines(self) -> list[str]:
        return [
            f"measure:                {self.measure}",
            f"paths x steps:          {self.n_paths} x {self.n_steps}",
            f"seed:                   {self.seed}",
            f"pole clamps:            {self.clamp_events}",
            f"clearing failures:      {self.clearing_failures}",
            f"degenerate paths:       {self.degenerate_paths}",
            f"interpolation flags:    {self.interp_flags}",
            f"monotonicity breaches:  {self.mono_violations}",
            f"density-floor breaches: {self.qfloor_violations}",
            f"low-band breaches:      {self.bound_violations}",
            f"top-band breaches:      {self.mc_violations}",
            f"min low-band margin:    {self.min_bound_margin!r}",
            f"min top-band margin:    {self.min_mc_margin!r}",
            f"max |lambda|:           {self.max_abs_lambda!r}",
            f"max lambda mass:        {self.max_lambda_mass!r}",
            f"max scaled residual:    {self.max_scaled_residual!r}",
            f"feasibility ok:         {self.feasibility_ok}",
            f"runtime seconds:        {self.runtime_s:.3f}",
        ]

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


@dataclass
class SimResult:
    paths: list[PathResult]
    report: RunReport

    def terminal_prices(self) -> np.ndarray:
        return np.array([p.pi[-1] for p in self.paths if not p.failed])

    def price_matrix(self) -> np.ndarray:
        """(n_paths, n_steps+1) clearing prices; failed paths hold NaN tails."""
        return np.stack([p.pi for p in self.paths])


def step_state(state: ModelState, db_column: np.ndarray,
               lam_column: np.ndarray | None, params: ModelParams) -> ModelState:
    """Advance the Gaussian states by one step.

    `db_column` holds the raw band increments for the step; under the
    pricing measure pass the solved risk prices and the deterministic
    shift lambda * ds * dt is removed first.
    """
    db = np.asarray(db_column, dtype=float)
    if db.shape[0] != params.grid.n_factors:
        raise ConfigurationError("increment column does not match the factor grid")
    if lam_column is not None:
        db = db - np.asarray(lam_column, dtype=float) * params.grid.cell_var
    x0 = state.x0 + params.sigbar_Q0 @ db
    xq = state.xq + params.kernel_rows() @ db
    return ModelState(x0=x0, xq=xq, t=state.t + params.grid.dt)


def clearing_price_batch(Q: np.ndarray, prices: np.ndarray, x: float):
    """Vectorized zero crossing of Q + x across the path axis.

    Returns (pi, interp_flags, failures): paths without a sign change
    get NaN and a failure flag; non-monotone crossings take the lowest
    bracket and raise the interpolation flag.
    """
    g = Q + x
    neg = g < 0.0
    ok = (g[0] >= 0.0) & neg[-1]
    j = np.argmax(neg, axis=0)
    j = np.clip(j, 1, Q.shape[0] - 1)
    cols = np.arange(g.shape[1])
    g_hi = g[j, cols]
    g_lo = g[j - 1, cols]
    denom = g_lo - g_hi
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(denom > 0.0, g_lo / np.where(denom == 0.0, 1.0, denom), 0.0)
    pi = prices[j - 1] + w * (prices[j] - prices[j - 1])
    pi = np.where(ok, pi, np.nan)
    flips = np.sum(np.abs(np.diff(neg.astype(np.int8), axis=0)), axis=0)
    flags = ok & (flips > 1)
    return pi, flags, ~ok


def _simulate_chunk(params: ModelParams, config: SimConfig,
                    path_ids: np.ndarray, factorization, lam_frozen):
    g = params.grid
    n_p, J = params.n_price, g.n_steps
    P = path_ids.size
    ds, dp, cell = g.ds, params.dp, g.cell_var
    prices = params.price_nodes()
    rows = params.kernel_rows()
    scale = np.sqrt(cell)

    draws = np.empty((P, n_p, J))
    for i, pid in enumerate(path_ids):
        draws[i] = standard_normal_matrix((n_p, J), config.seed, int(pid)) * scale

    x0 = np.zeros(P)
    xq = np.zeros((n_p + 1, P))
    pi = np.full((J + 1, P), np.nan)
    tracked = {x: np.full((J + 1, P), np.nan) for x in config.track_positions}
    alive = np.ones(P, dtype=bool)
    fail_step = np.full(P, -1)
    clamps = np.zeros(P, dtype=int)
    lam_traces = np.zeros((P, n_p, J)) if config.record_lambda else None
    surfaces = [[] for _ in range(P)] if config.record_surfaces else None

    stats = RunReport()
    q_floor = params.q0 + params.d1_min
    mono_tol = config.mono_tol_frac * max(abs(params.Q00) + params.d0_max, 1.0)

    def eval_surface():
        x0c, c0 = clamp_pole(x0)
        xqc, c1 = clamp_pole(xq)
        sick = np.zeros(P, dtype=bool)
        if c0 or c1:
            hits = ((x0 < POLE_CLAMP).astype(int)
                    + np.count_nonzero(xq < POLE_CLAMP, axis=0))
            clamps[:] += hits
            stats.clamp_events += int(hits[alive].sum())
            sick = hits > 0
        q = params.q0[:, None] + params.f1.value(xqc)
        Q = (params.Q00 + params.f0.value(x0c))[None, :] - cumtrapz_price(q, dp, axis=0)
        return Q, q, ModelState(x0=x0c, xq=xqc), sick

    def kill(mask, j):
        """Drop paths and park their state at the benign origin; their
        draws are zeroed from here on so they can no longer degenerate."""
        newly = mask & alive
        if newly.any():
            alive[newly] = False
            fail_step[newly] = j
            x0[newly] = 0.0
            xq[:, newly] = 0.0
        return bool(newly.any()), int(np.count_nonzero(newly))

    def run_checks(Q, q):
        live = alive
        if not live.any():
            return
        mono = np.diff(Q[:, live], axis=0) > mono_tol
        stats.mono_violations += int(np.count_nonzero(np.any(mono, axis=0)))
        qf = q[:, live] < (q_floor[:, None] - mono_tol)
        stats.qfloor_violations += int(np.count_nonzero(np.any(qf, axis=0)))
        bound_margin = Q[1, live] + params.x_min
        mc_margin = -(Q[-1, live] + params.x_max)
        stats.bound_violations += int(np.count_nonzero(bound_margin < 0.0))
        stats.mc_violations += int(np.count_nonzero(mc_margin < 0.0))
        stats.min_bound_margin = min(stats.min_bound_margin, float(bound_margin.min()))
        stats.min_mc_margin = min(stats.min_mc_margin, float(mc_margin.min()))

    def read_prices(Q, j):
        p0, flags, fails = clearing_price_batch(Q, prices, 0.0)
        pi[j, alive & ~fails] = p0[alive & ~fails]
        _, n = kill(fails, j)
        stats.clearing_failures += n
        stats.interp_flags += int(np.count_nonzero(flags & alive))
        for x in config.track_positions:
            px, _, failx = clearing_price_batch(Q, prices, x)
            keep = alive & ~failx
            tracked[x][j, keep] = px[keep]

    rn = config.measure == Measure.RISK_NEUTRAL
    Q, q, state, sick = eval_surface()
    run_checks(Q, q)
    read_prices(Q, 0)
    if surfaces is not None:
        for i in range(P):
            surfaces[i].append((Q[:, i].copy(), q[:, i].copy()))

    ws = _RnWorkspace(n_p, P) if rn and not config.freeze_lambda else None

    for j in range(J):
        db = draws[:, :, j].T                       # (n_p, P)
        if rn:
            if config.freeze_lambda and lam_frozen is not None:
                lam = np.repeat(lam_frozen[:, None], P, axis=1)
            else:
                # paths that left the solvable region (pole clamps, flat
                # response or demand, non-positive head-band denominator)
                # are dropped before the batched solve
                h1 = params.f1.deriv(state.xq)
                h0 = np.asarray(params.f0.deriv(state.x0), dtype=float)
                Qp = fd_gradient(Q, dp, axis=0)
                denom0 = (h0 * params.sigbar_Q0[0]
                          - 0.5 * dp * h1[0] * params.sigbar_q_head[0]) * ds
                bad = (sick
                       | (np.min(np.abs(h1), axis=0) < config.h1_floor)
                       | (np.max(Qp[1:], axis=0) >= -config.qp_floor)
                       | (denom0 < config.eta_floor))
                dropped, n = kill(bad, j)
                stats.degenerate_paths += n
                if dropped:
                    Q, q, state, sick = eval_surface()
                A, h1, sig_low, sigtilde = _assemble_rn_inputs(
                    state, Q, params, ws, config.qp_floor,
                    want_sigtilde=config.compute_residuals)
                inputs = MprInputs(A=A, h1=h1, sigbar_q=params.sigbar_q,
                                   sigtilde_low=sig_low, ds=ds, dp=dp)
                lam = solve_mpr_step(inputs, factorization,
                                     eta_floor=config.eta_floor,
                                     h1_floor=config.h1_floor)
                lam[:, ~alive] = 0.0
                if config.compute_residuals:
                    res = mpr_residual(lam, sigtilde[1:], A[1:], ds)
                    scale_A = 1.0 + np.max(np.abs(A[1:]), axis=0)
                    stats.max_scaled_residual = max(
                        stats.max_scaled_residual,
                        float(np.max(np.max(np.abs(res), axis=0) / scale_A)))
            stats.max_abs_lambda = max(stats.max_abs_lambda, float(np.abs(lam).max()))
            stats.max_lambda_mass = max(
                stats.max_lambda_mass,
                float(np.max(np.sum(lam * lam, axis=0)) * ds * g.dt))
            if lam_traces is not None:
                lam_traces[:, :, j] = lam.T
            db = db - lam * cell
        if not alive.all():
            if db.base is not None:          # still a view into the draw block
                db = db.copy()
            db[:, ~alive] = 0.0
        x0 += params.sigbar_Q0 @ db
        xq += rows @ db
        Q, q, state, sick = eval_surface()
        run_checks(Q, q)
        read_prices(Q, j + 1)
        if surfaces is not None:
            for i in range(P):
                surfaces[i].append((Q[:, i].copy(), q[:, i].copy()))

    results = []
    for i, pid in enumerate(path_ids):
        results.append(PathResult(
            path_id=int(pid), pi=pi[:, i].copy(), clamps=int(clamps[i]),
            tracked={x: tracked[x][:, i].copy() for x in config.track_positions},
            surfaces=surfaces[i] if surfaces is not None else None,
            lambda_trace=lam_traces[i].copy() if lam_traces is not None else None,
            failed=not alive[i], fail_step=int(fail_step[i])))
    return results, stats


def _merge(total: RunReport, part: RunReport) -> None:
    total.clamp_events += part.clamp_events
    total.clearing_failures += part.clearing_failures
    total.degenerate_paths += part.degenerate_paths
    total.interp_flags += part.interp_flags
    total.mono_violations += part.mono_violations
    total.qfloor_violations += part.qfloor_violations
    total.bound_violations += part.bound_violations
    total.mc_violations += part.mc_violations
    total.min_bound_margin = min(total.min_bound_margin, part.min_bound_margin)
    total.min_mc_margin = min(total.min_mc_margin, part.min_mc_margin)
    total.max_abs_lambda = max(total.max_abs_lambda, part.max_abs_lambda)
    total.max_lambda_mass = max(total.max_lambda_mass, part.max_lambda_mass)
    total.max_scaled_residual = max(total.max_scaled_residual, part.max_scaled_residual)


def run(params: ModelParams, config: SimConfig) -> SimResult:
    """Simulate `config.n_paths` surface paths and their clearing prices."""
    started = time.perf_counter()
    report = RunReport(measure=config.measure.value, n_paths=config.n_paths,
                       n_steps=params.grid.n_steps, seed=config.seed)
    if config.strict_bounds:
        feas = check_feasibility(params)
        report.feasibility_ok = feas.feasible
        if not feas.feasible:
            raise ConfigurationError(
                "parameter set fails the clearing-band feasibility checks; "
                "rerun without strict bounds to proceed anyway")

    rn = config.measure == Measure.RISK_NEUTRAL
    factorization = KernelFactorization(params.sigbar_q) if rn else None
    lam_frozen = None
    if rn and config.freeze_lambda:
        state0 = ModelState.initial(params)
        Q0, _ = surface_from_state(state0, params)
        mu_Q, sigtilde = drift_diffusion(state0, params)
        A = compute_A(Q0, mu_Q, sigtilde, params.dp, params.grid.ds, config.qp_floor)
        inputs = MprInputs(A=A, h1=params.f1.deriv(state0.xq),
                           sigbar_q=params.sigbar_q, sigtilde_low=sigtilde[1],
                           ds=params.grid.ds, dp=params.dp)
        lam_frozen = solve_mpr_step(inputs, factorization,
                                    eta_floor=config.eta_floor,
                                    h1_floor=config.h1_floor)

    chunks = [np.arange(lo, min(lo + config.chunk_size, config.n_paths))
              for lo in range(0, config.n_paths, config.chunk_size)]
    parts: list = [None] * len(chunks)
    if config.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            futs = {pool.submit(_simulate_chunk, params, config, ids,
                                factorization, lam_frozen): k
                    for k, ids in enumerate(chunks)}
            for fut, k in futs.items():
                parts[k] = fut.result()
    else:
        for k, ids in enumerate(chunks):
            parts[k] = _simulate_chunk(params, config, ids, factorization, lam_frozen)

    paths: list[PathResult] = []
    for results, stats in parts:
        paths.extend(results)
        _merge(report, stats)
    report.runtime_s = time.perf_counter() - started
    return SimResult(paths, report)


def write_paths_csv(path, result: SimResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATHS_HEADER)
        for p in result.paths:
            for j, v in enumerate(p.pi):
                w.writerow([p.path_id, j, repr(float(v))])


def read_terminal_prices(path) -> tuple[np.ndarray, float]:
    """Read a paths CSV; returns (terminal prices per path, common start price)."""
    by_path: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PATHS_HEADER:
            raise ConfigurationError(f"bad paths header {header!r}")
        for pid, j, v in reader:
            by_path.setdefault(int(pid), {})[int(j)] = float(v)
    if not by_path:
        raise ClearingError("paths file holds no rows")
    terminal = []
    start = None
    for pid in sorted(by_path):
        steps = by_path[pid]
        terminal.append(steps[max(steps)])
        if start is None:
            start = steps[min(steps)]
    return np.array(terminal), float(start)
