import numpy as np
import pytest

from stringliq.demand_model import ModelParams
from stringliq.string_field import GridSpec


@pytest.fixture
def toy_params() -> ModelParams:
    """Small hand-built parameter set (12 price steps, 16 time steps)."""
    rng = np.random.default_rng(3)
    I, J = 12, 16
    S = 10.0
    dp = S / I
    M = 0.55 * (np.eye(I - 1) + 0.05 * rng.standard_normal((I - 1, I - 1)))
    head = np.zeros(I + 1)
    head[0] = 0.45
    q0 = 40.0 + 5.0 * rng.random(I + 1)
    sq0 = np.zeros(I)
    sq0[0] = -0.35
    return ModelParams(S=S, eps=1.0 / I, x_min=-30.0, x_max=30.0,
                       d0_min=0.5, d0_max=120.0, d1_min=0.01, d1_max=25.0,
                       Q00=300.0, q0=q0, sigbar_Q0=sq0, sigbar_q_head=head,
                       sigbar_q=M, grid=GridSpec(I, J, 1.0), dp=dp)
