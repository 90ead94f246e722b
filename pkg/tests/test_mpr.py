import numpy as np
import pytest

from stringliq.demand_model import ModelState, drift_diffusion, surface_from_state
from stringliq.errors import (InapplicabilityError, InversionError,
                              NearFlatDemandError, PositivityError, SolverError)
from stringliq.mpr import (KernelFactorization, LinearDemandModel, LognormalModel,
                           MprInputs, SeparatedDemandModel, compute_A,
                           lambda_linear, lambda_lognormal, lambda_separated,
                           lognormal_price_residual, mpr_residual, solve_mpr_step)


def random_well_conditioned(n, rng):
    m = np.eye(n) + 0.5 * rng.standard_normal((n, n)) / np.sqrt(n)
    assert np.linalg.cond(m) < 1e4
    return m


def toy_inputs(params, state=None, rng=None):
    if state is None:
        rng = rng or np.random.default_rng(0)
        state = ModelState(x0=0.2, xq=rng.uniform(-0.3, 0.7, params.n_price + 1))
    Q, _ = surface_from_state(state, params)
    mu_Q, sig = drift_diffusion(state, params)
    A = compute_A(Q, mu_Q, sig, params.dp, params.grid.ds)
    return MprInputs(A=A, h1=params.f1.deriv(state.xq), sigbar_q=params.sigbar_q,
                     sigtilde_low=sig[1], ds=params.grid.ds, dp=params.dp), sig, A


# --- discrete solver -------------------------------------------------------

def test_solve_zeroes_demand_format_residual(toy_params):
    inputs, sig, A = toy_inputs(toy_params)
    lam = solve_mpr_step(inputs)
    res = mpr_residual(lam, sig[1:], A[1:], toy_params.grid.ds)
    assert np.max(np.abs(res)) <= 1e-8 * (1.0 + np.max(np.abs(A)))


def test_solver_batch_matches_single(toy_params):
    rng = np.random.default_rng(5)
    n = toy_params.n_price
    xq = rng.uniform(-0.3, 0.7, (n + 1, 4))
    x0 = rng.uniform(-0.2, 0.4, 4)
    state = ModelState(x0=x0, xq=xq)
    inputs, sig, A = toy_inputs(toy_params, state=state)
    lam = solve_mpr_step(inputs)
    for p in range(4):
        single = ModelState(x0=x0[p], xq=xq[:, p])
        inputs1, _, _ = toy_inputs(toy_params, state=single)
        lam1 = solve_mpr_step(inputs1)
        assert np.allclose(lam1, lam[:, p], rtol=1e-12, atol=1e-12)


def test_manufactured_solution_recovery():
    rng = np.random.default_rng(17)
    for n in (10, 25):
        M = random_well_conditioned(n - 1, rng)
        lam_true = rng.standard_normal(n - 1)
        fact = KernelFactorization(M)
        u = M @ lam_true
        lam = fact.solve(u)
        assert np.max(np.abs(lam - lam_true)) <= 1e-10 * np.max(np.abs(lam_true))


def test_identity_kernel_passthrough(toy_params):
    """With the identity kernel matrix the band values equal the
    differenced right-hand side itself."""
    import dataclasses
    params = dataclasses.replace(toy_params, sigbar_q=np.eye(toy_params.n_price - 1))
    inputs, sig, A = toy_inputs(params)
    lam = solve_mpr_step(inputs)
    # independent reimplementation of the backward sweep
    n = params.n_price
    h1 = np.asarray(inputs.h1)
    g = 2.0 * (A[1:n] - A[2:n + 1]) / (params.dp * params.grid.ds)
    u = np.zeros(n - 1)
    carry = 0.0
    for m in range(n - 1, 0, -1):
        u[m - 1] = (g[m - 1] - carry) / h1[m]
        carry = h1[m] * u[m - 1]
    assert np.allclose(lam[1:], u, rtol=1e-12)


def test_zero_drift_gives_zero_lambda(toy_params):
    inputs, sig, _ = toy_inputs(toy_params)
    zeroed = MprInputs(A=np.zeros_like(inputs.A), h1=inputs.h1,
                       sigbar_q=inputs.sigbar_q, sigtilde_low=inputs.sigtilde_low,
                       ds=inputs.ds, dp=inputs.dp)
    lam = solve_mpr_step(zeroed)
    assert np.allclose(lam, 0.0, atol=1e-14)


def test_positivity_floor_raises(toy_params):
    inputs, _, _ = toy_inputs(toy_params)
    flipped = MprInputs(A=inputs.A, h1=inputs.h1, sigbar_q=inputs.sigbar_q,
                        sigtilde_low=-inputs.sigtilde_low, ds=inputs.ds,
                        dp=inputs.dp)
    with pytest.raises(PositivityError):
        solve_mpr_step(flipped)


def test_h1_floor_raises(toy_params):
    inputs, _, _ = toy_inputs(toy_params)
    tiny = MprInputs(A=inputs.A, h1=np.full_like(inputs.h1, 1e-15),
                     sigbar_q=inputs.sigbar_q, sigtilde_low=inputs.sigtilde_low,
                     ds=inputs.ds, dp=inputs.dp)
    with pytest.raises(SolverError):
        solve_mpr_step(tiny)


def test_singular_kernel_matrix_rejected():
    with pytest.raises(SolverError):
        KernelFactorization(np.zeros((4, 4)))


def test_residual_trivia(toy_params):
    n = toy_params.n_price
    sig = np.random.default_rng(2).normal(size=(n, n))
    assert np.allclose(mpr_residual(np.zeros(n), sig, np.zeros(n),
                                    toy_params.grid.ds), 0.0)
    # bumping one band changes each row by sigtilde * ds exactly
    lam = np.random.default_rng(3).normal(size=n)
    base = mpr_residual(lam, sig, np.zeros(n), toy_params.grid.ds)
    lam2 = lam.copy()
    lam2[4] += 1.0
    moved = mpr_residual(lam2, sig, np.zeros(n), toy_params.grid.ds)
    assert np.allclose(moved - base, sig[:, 4] * toy_params.grid.ds, rtol=1e-12)


def test_differenced_rhs_matches_fredholm_reassembly(toy_params):
    """The right-hand side fed to the kernel system equals the exact price
    difference of the assembled node equations, reassembled independently."""
    inputs, sig, A = toy_inputs(toy_params)
    lam = solve_mpr_step(inputs)
    n = toy_params.n_price
    ds, dp = toy_params.grid.ds, toy_params.dp
    M = toy_params.sigbar_q
    u = M @ lam[1:]
    h1 = np.asarray(inputs.h1)
    lhs = 0.5 * dp * (h1[1:n] * u + np.append(h1[2:n] * u[1:], 0.0)) * ds
    rhs = A[1:n] - A[2:n + 1]
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * (1 + np.abs(A).max()))


# --- drift functional -------------------------------------------------------

def test_compute_A_matches_brute_force(toy_params):
    rng = np.random.default_rng(11)
    state = ModelState(x0=0.1, xq=rng.uniform(-0.2, 0.5, toy_params.n_price + 1))
    Q, _ = surface_from_state(state, toy_params)
    mu_Q, sig = drift_diffusion(state, toy_params)
    dp, ds = toy_params.dp, toy_params.grid.ds
    A = compute_A(Q, mu_Q, sig, dp, ds)

    n = Q.size
    Qp = np.empty(n)
    Qpp = np.empty(n)
    for i in range(n):
        if i == 0:
            Qp[i] = (-3 * Q[0] + 4 * Q[1] - Q[2]) / (2 * dp)
            Qpp[i] = (2 * Q[0] - 5 * Q[1] + 4 * Q[2] - Q[3]) / dp ** 2
        elif i == n - 1:
            Qp[i] = (3 * Q[-1] - 4 * Q[-2] + Q[-3]) / (2 * dp)
            Qpp[i] = (2 * Q[-1] - 5 * Q[-2] + 4 * Q[-3] - Q[-4]) / dp ** 2
        else:
            Qp[i] = (Q[i + 1] - Q[i - 1]) / (2 * dp)
            Qpp[i] = (Q[i + 1] - 2 * Q[i] + Q[i - 1]) / dp ** 2
    ref = np.empty(n)
    for i in range(n):
        if i == 0:
            dsig = (-3 * sig[0] + 4 * sig[1] - sig[2]) / (2 * dp)
        elif i == n - 1:
            dsig = (3 * sig[-1] - 4 * sig[-2] + sig[-3]) / (2 * dp)
        else:
            dsig = (sig[i + 1] - sig[i - 1]) / (2 * dp)
        s2 = sum(sig[i, k] ** 2 for k in range(sig.shape[1])) * ds
        C = -sum(dsig[k] * sig[i, k] for k in range(sig.shape[1])) * ds / Qp[i]
        ref[i] = mu_Q[i] + 0.5 * Qpp[i] * s2 / Qp[i] ** 2 + C
    assert np.allclose(A, ref, rtol=1e-10, atol=1e-10 * (1 + np.abs(ref).max()))


def test_compute_A_flat_demand_raises():
    Q = np.full(6, 3.0)
    with pytest.raises(NearFlatDemandError):
        compute_A(Q, np.zeros(6), np.zeros((6, 5)), 0.5, 0.2)


def test_compute_A_vanishes_for_linear_flat_case():
    prices = np.linspace(0.0, 5.0, 11)
    Q = 10.0 - 2.0 * prices
    sig = np.tile(np.linspace(0.5, 0.1, 8), (11, 1))
    A = compute_A(Q, np.zeros(11), sig, 0.5, 1.0 / 8)
    assert np.allclose(A, 0.0, atol=1e-12)


def test_compute_A_linear_model_reduction():
    # when demand is price-linear, A = mu_Q - sum sigtilde h_Q ds with
    # h_Q the loading slope over the demand slope
    s = (np.arange(8) + 0.0) / 8
    c = 1.0 + 0.3 * np.cos(2 * np.pi * s)
    h_Q = 0.2 + 0.1 * np.sin(2 * np.pi * s)
    prices = np.linspace(0.0, 4.0, 9)
    Qp = -2.0
    Q = 30.0 + Qp * prices
    sig = c[None, :] + Qp * np.outer(prices, h_Q)
    mu_Q = 0.7 * np.ones(9)
    ds = 1.0 / 8
    A = compute_A(Q, mu_Q, sig, prices[1] - prices[0], ds)
    ref = mu_Q - sig @ h_Q * ds
    assert np.allclose(A, ref, rtol=1e-10)


# --- analytic families -------------------------------------------------------

def linear_test_model():
    n_s, n_p = 16, 21
    s = np.arange(n_s) / n_s
    ds = 1.0 / n_s
    prices = np.linspace(0.0, 3.0, n_p)
    c = 1.0 + 0.3 * np.cos(2 * np.pi * s)
    h_Q = 0.2 + 0.1 * np.sin(2 * np.pi * s)
    lam_Q = 0.5 + 0.2 * np.cos(4 * np.pi * s)
    Qp = -2.0
    Q = 30.0 + Qp * prices
    sig = c[None, :] + Qp * np.outer(prices, h_Q)
    mu_Q = sig @ lam_Q * ds
    return LinearDemandModel(prices=prices, Q=Q, mu_Q=mu_Q, sigtilde=sig,
                             lambda_Q=lam_Q, ds=ds), h_Q


def test_lambda_linear_formula_and_residual():
    model, h_Q = linear_test_model()
    lam = lambda_linear(model)
    assert np.allclose(lam, model.lambda_Q - h_Q, rtol=1e-12)
    A = compute_A(model.Q, model.mu_Q, model.sigtilde,
                  model.prices[1] - model.prices[0], model.ds)
    res = mpr_residual(lam, model.sigtilde, A, model.ds)
    assert np.max(np.abs(res)) <= 1e-10


def test_lambda_linear_zero_cases():
    model, h_Q = linear_test_model()
    import dataclasses
    flat = dataclasses.replace(model, sigtilde=np.tile(model.sigtilde[:1],
                                                       (model.prices.size, 1)),
                               mu_Q=np.zeros_like(model.mu_Q),
                               lambda_Q=np.zeros_like(model.lambda_Q))
    lam = lambda_linear(flat)
    assert np.allclose(lam, 0.0, atol=1e-12)
    # h_Q nonzero with lambda_Q = 0 gives lambda = -h_Q
    nol = dataclasses.replace(model, mu_Q=np.zeros_like(model.mu_Q),
                              lambda_Q=np.zeros_like(model.lambda_Q))
    assert np.allclose(lambda_linear(nol), -h_Q, rtol=1e-10, atol=1e-12)


def test_lambda_linear_rejects_curvature():
    model, _ = linear_test_model()
    import dataclasses
    bent = dataclasses.replace(model, Q=model.Q + 0.5 * model.prices ** 2)
    with pytest.raises(InapplicabilityError):
        lambda_linear(bent)


def separated_test_model(n_s=32, n_p=41, kind="quadratic", state=0.4):
    s = np.arange(n_s) / n_s
    ds = 1.0 / n_s
    b = 1.0 + 0.4 * np.cos(2 * np.pi * s)
    b = b / np.sqrt(np.sum(b * b) * ds)
    if kind == "quadratic":
        prices = np.linspace(0.0, 2.0, n_p)
        sigma = (3.0 - 0.8 * prices) ** 2      # sigma0 = 1/2, decreasing
    else:
        prices = np.linspace(0.5, 1.5, n_p)
        sigma = np.exp(-prices)                # sigma0 = 1
    return SeparatedDemandModel(
        prices=prices, sigma=sigma, b=b,
        f=lambda x: 4.0 + np.exp(x), f1=lambda x: np.exp(x),
        f2=lambda x: np.exp(x), state=state, ds=ds)


def separated_residual(model, lam):
    h0, h1, _ = model.h_values()
    sig = np.outer(model.sigma * h1, model.b)
    Q = model.sigma * h0
    mu_Q = model.sigma * (0.5 * model.f2(model.state))
    dp = model.prices[1] - model.prices[0]
    A = compute_A(Q, mu_Q, sig, dp, model.ds)
    return mpr_residual(lam, sig, A, model.ds)


def test_lambda_separated_quadratic_scale_machine_zero():
    model = separated_test_model(kind="quadratic")
    assert model.sigma0() == pytest.approx(0.5, abs=1e-10)
    lam = lambda_separated(model)
    assert np.max(np.abs(separated_residual(model, lam))) <= 1e-8


def test_lambda_separated_exponential_scale():
    model = separated_test_model(n_s=64, n_p=1001, kind="exponential")
    assert model.sigma0() == pytest.approx(1.0, abs=1e-6)
    lam = lambda_separated(model)
    assert np.max(np.abs(separated_residual(model, lam))) <= 1e-8


def test_lambda_separated_residual_halves_under_refinement():
    res = []
    for n_p in (251, 501):
        model = separated_test_model(n_s=64, n_p=n_p, kind="exponential")
        res.append(np.max(np.abs(separated_residual(model,
                                                    lambda_separated(model)))))
    assert res[1] <= max(0.5 * res[0], 1e-12)


def test_lambda_separated_constant_response_is_zero():
    model = separated_test_model()
    import dataclasses
    const = dataclasses.replace(model, f=lambda x: 4.0, f1=lambda x: 0.0,
                                f2=lambda x: 0.0)
    with pytest.raises(InapplicabilityError):
        lambda_separated(const)   # h1 = 0 leaves the family underdetermined


def test_lambda_separated_linear_affine_formula():
    # sigma linear (sigma0 = 0) and F affine (h2 = 0): lambda = -b F'/F
    n_s, n_p = 16, 21
    s = np.arange(n_s) / n_s
    ds = 1.0 / n_s
    b = np.ones(n_s)
    b = b / np.sqrt(np.sum(b * b) * ds)
    prices = np.linspace(0.0, 2.0, n_p)
    model = SeparatedDemandModel(
        prices=prices, sigma=5.0 - 1.3 * prices, b=b,
        f=lambda x: 2.0 + 0.5 * x, f1=lambda x: 0.5, f2=lambda x: 0.0,
        state=0.8, ds=ds)
    lam = lambda_separated(model)
    h0, h1, _ = model.h_values()
    assert np.allclose(lam, -b * h1 / h0, rtol=1e-12)


def test_lambda_separated_rejects_nonconstant_scale():
    model = separated_test_model()
    import dataclasses
    bad = dataclasses.replace(model, sigma=3.0 / (1.0 + model.prices ** 2))
    with pytest.raises(InapplicabilityError):
        lambda_separated(bad)


def lognormal_test_model(n_bands=250, eps=0.1):
    x_min, x_max = -1.0, 2.0

    def sigbar(x, s):
        s = np.asarray(s, dtype=float)
        f_x = 2.0 * eps + (1.0 - 2.0 * eps) * (x - x_min) / (x_max - x_min)
        body = (1.0 + 0.5 * np.cos(np.pi * s)) * (1.0 + 0.3 * np.tanh(x))
        out = np.where(s + 1.0 / n_bands <= f_x + 1e-12, body, 0.0)
        low = 0.7 if abs(x - x_min) < 1e-12 else 0.0
        return np.where(s < eps - 1e-12, low, out)

    return LognormalModel(
        eps=eps, x_min=x_min, x_max=x_max,
        p0=lambda x: 1.0 + 0.1 * x * x,
        mubar=lambda x: 0.3 + 0.2 * np.sin(x),
        sigbar=sigbar, n_bands=n_bands)


def test_lambda_lognormal_residual_on_200_nodes():
    model = lognormal_test_model(n_bands=250)
    assert model.x_nodes().size == 201
    lam = lambda_lognormal(model)
    assert np.all(np.isfinite(lam))
    res = lognormal_price_residual(model, lam)
    assert np.max(np.abs(res)) <= 1e-6


def test_lambda_lognormal_refinement_does_not_grow():
    coarse = lognormal_test_model(n_bands=250)
    fine = lognormal_test_model(n_bands=500)
    r1 = np.max(np.abs(lognormal_price_residual(coarse, lambda_lognormal(coarse))))
    r2 = np.max(np.abs(lognormal_price_residual(fine, lambda_lognormal(fine))))
    assert r2 <= max(0.6 * r1, 1e-10)


def test_lambda_lognormal_unit_kernel_head_value():
    # constant drift c with unit kernel: the first solved stretch is c / eps
    eps, n_bands, c = 0.1, 100, 0.45
    x_min, x_max = 0.0, 1.0

    def sigbar(x, s):
        s = np.asarray(s, dtype=float)
        f_x = 2.0 * eps + (1.0 - 2.0 * eps) * (x - x_min) / (x_max - x_min)
        out = np.where((s >= eps - 1e-12) & (s + 1.0 / n_bands <= f_x + 1e-12),
                       1.0, 0.0)
        return np.where(s < eps - 1e-12,
                        1.0 if abs(x - x_min) < 1e-12 else 0.0, out)

    model = LognormalModel(eps=eps, x_min=x_min, x_max=x_max,
                           p0=lambda x: 1.0, mubar=lambda x: c,
                           sigbar=sigbar, n_bands=n_bands)
    lam = lambda_lognormal(model)
    n_e = model.n_eps
    assert np.allclose(lam[n_e:2 * n_e], c / eps, rtol=1e-12)
    assert np.allclose(lam[2 * n_e:], 0.0, atol=1e-10)


def test_lambda_lognormal_zero_drift():
    model = lognormal_test_model(n_bands=100)
    import dataclasses
    quiet = dataclasses.replace(model, mubar=lambda x: 0.0)
    lam = lambda_lognormal(quiet)
    assert np.allclose(lam, 0.0, atol=1e-12)


def test_lambda_lognormal_missing_low_band_raises():
    model = lognormal_test_model(n_bands=100)

    def no_low(x, s):
        s = np.asarray(s, dtype=float)
        return np.where(s < model.eps - 1e-12, 0.0, model.sigbar(x, s))

    import dataclasses
    bad = dataclasses.replace(model, sigbar=no_low)
    with pytest.raises(InversionError):
        lambda_lognormal(bad)
