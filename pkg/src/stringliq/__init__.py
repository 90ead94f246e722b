"""Order-book driven market liquidity toolkit.

Builds net-demand surfaces from limit-order events, calibrates a
string-driven surface model, solves the discretized market-price-of-risk
system, simulates clearing prices under the physical and pricing
measures, and prices European options off the simulated terminal price.
"""

from .arbitrage import FiniteFactorModel, default_model, run_demo
from .demand_model import (CalibrationConfig, ModelParams, ModelState,
                           PriceCoefficients, calibrate, check_feasibility,
                           drift_diffusion, feasibility_bounds, load_params,
                           price_coefficients, save_params, surface_from_state)
from .lob import (BookState, DemandSurface, OrderEvent, SynthConfig, build_surface,
                  match_order, parse_events, synthesize_events)
from .mpr import (KernelFactorization, LinearDemandModel, LognormalModel, MprInputs,
                  SeparatedDemandModel, compute_A, lambda_linear, lambda_lognormal,
                  lambda_separated, mpr_residual, solve_mpr_step)
from .pricing import (OptionKind, OptionSpec, SmilePoint, bs_delta, bs_price,
                      implied_vol, mc_prices, smile_report)
from .simulator import Measure, PathResult, SimConfig, clearing_price_batch, run, step_state
from .string_field import (GridSpec, RiskPriceField, SheetIncrements, girsanov_shift,
                           integrate_kernel, sample_sheet)

__version__ = "0.1.0"
