"""Discrete two-parameter Gaussian noise field and measure-change helpers.

The driving noise of the whole toolkit is a random field B(s, t) indexed
by a factor coordinate s in [0, 1] and time t in [0, horizon], with
covariance  E B(s,t) B(r,u) = min(s,r) * min(t,u).  On a grid of
`n_factors` factor bands by `n_steps` time steps the field is generated
through its cell increments: independent draws

    dB[k, j] ~ Normal(0, ds * dt),   ds = 1/n_factors, dt = horizon/n_steps,

one per band-step cell.  Every stochastic integral the models need is a
band-weighted sum of a column of these increments, and the change to the
pricing measure is the deterministic cell shift

    dB_phys[k, j] = dB_rn[k, j] - lambda[k, j] * ds * dt.

Sampling is counter-based: a Philox stream keyed by (seed, path_id)
yields open-interval uniforms which are mapped through the fixed
inverse-CDF in :mod:`stringliq.gaussian`, so any cell value is a pure
function of (seed, path_id, k, j), paths can be generated in parallel in
any order, and regeneration is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .gaussian import norm_ppf

_HEADER = struct.Struct("<iid")  # n_factors, n_steps, horizon


@dataclass(frozen=True)
class GridSpec:
    """Factor-band / time-step grid.

    `ds * n_factors == 1` and `dt * n_steps == horizon` hold by
    construction since the widths are derived quantities.
    """

    n_factors: int
    n_steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.n_factors < 1 or self.n_steps < 1:
            raise ConfigurationError(
                f"grid must have positive dimensions, got "
                f"{self.n_factors} x {self.n_steps}")
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")

    @property
    def ds(self) -> float:
        return 1.0 / self.n_factors

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def cell_var(self) -> float:
        return self.ds * self.dt

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_factors, self.n_steps)

    def factor_nodes(self) -> np.ndarray:
        """Band edges s_0..s_{n_factors} on [0, 1]."""
        return np.linspace(0.0, 1.0, self.n_factors + 1)

    def time_nodes(self) -> np.ndarray:
        """Step edges t_0..t_{n_steps} on [0, horizon]."""
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SheetIncrements:
    """Grid of independent Normal(0, ds*dt) cell increments for one path."""

    grid: GridSpec
    values: np.ndarray
    seed: int = 0
    path_id: int = 0

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise DimensionError(
                f"increment matrix shape {self.values.shape} does not match "
                f"grid {self.grid.shape}")
        object.__setattr__(self, "values", _readonly(self.values))


@dataclass(frozen=True)
class RiskPriceField:
    """Per-band, per-step market price of risk lambda_j(k)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise DimensionError(
                f"risk-price matrix shape {self.values.shape} does not match "
                f"grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("risk-price field contains non-finite entries")
        object.__setattr__(self, "values", _readonly(self.values))

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "RiskPriceField":
        return cls(grid, np.full(grid.shape, float(value)))


def _philox(seed: int, path_id: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(path_id & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normal_matrix(shape: tuple[int, ...], seed: int, path_id: int) -> np.ndarray:
    """Deterministic N(0,1) draws for one (seed, path_id) key.

    Raw 64-bit words are mapped to uniforms strictly inside (0, 1) with
    53-bit resolution before the inverse CDF, so no draw can land on an
    endpoint.
    """
    gen = _philox(seed, path_id)
    words = gen.integers(0, 2 ** 64, size=shape, dtype=np.uint64, endpoint=False)
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
    return norm_ppf(u)


def sample_sheet(grid: GridSpec, seed: int, path_id: int = 0) -> SheetIncrements:
    """Draw the increment matrix for one path."""
    z = standard_normal_matrix(grid.shape, seed, path_id)
    return SheetIncrements(grid, z * np.sqrt(grid.cell_var), seed, path_id)


def integrate_kernel(kernel: np.ndarray, increments: SheetIncrements, j: int) -> float:
    """Step-j increment of the integral of a band kernel against the field.

    Returns sum_k kernel[k] * dB[k, j], the discrete counterpart of
    integrating b(s) B(ds, dt) over one time step.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (increments.grid.n_factors,):
        raise DimensionError(
            f"kernel length {kernel.shape} does not match "
            f"{increments.grid.n_factors} factor bands")
    if not 0 <= j < increments.grid.n_steps:
        raise DimensionError(f"step index {j} outside 0..{increments.grid.n_steps - 1}")
    return float(kernel @ increments.values[:, j])


def girsanov_shift(increments: SheetIncrements, lam: RiskPriceField) -> SheetIncrements:
    """Convert risk-neutral draws to physical-measure increments.

    Cell (k, j) of the result equals the input cell minus
    lambda_j(k) * ds * dt; the input is left untouched.
    """
    if lam.grid != increments.grid:
        raise DimensionError("risk-price grid does not match increment grid")
    g = increments.grid
    shifted = increments.values - lam.values * g.cell_var
    return SheetIncrements(g, shifted, increments.seed, increments.path_id)


def reconstruct_field(increments: SheetIncrements) -> np.ndarray:
    """Field values B(s_k, t_j) at interior grid nodes.

    Entry (k, j) is B at node (s_{k+1}, t_{j+1}), i.e. the double
    cumulative sum of the cell increments; B vanishes on the axes.
    """
    return np.cumsum(np.cumsum(increments.values, axis=0), axis=1)


def write_increments(path, increments: SheetIncrements) -> None:
    """Binary debug dump: 16-byte header then row-major float64, little-endian."""
    g = increments.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(g.n_factors, g.n_steps, g.horizon))
        fh.write(increments.values.astype("<f8").tobytes(order="C"))


def read_increments(path) -> SheetIncrements:
    """Read a dump produced by :func:`write_increments`.

    The file does not carry the RNG key, so the result reports
    seed = path_id = -1.
    """
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise DimensionError("increment dump too short for header")
        n_factors, n_steps, horizon = _HEADER.unpack(raw)
        grid = GridSpec(n_factors, n_steps, horizon)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_factors * n_steps:
        raise DimensionError(
            f"increment dump payload has {data.size} values, expected "
            f"{n_factors * n_steps}")
    return SheetIncrements(grid, data.reshape(grid.shape).copy(), seed=-1, path_id=-1)
