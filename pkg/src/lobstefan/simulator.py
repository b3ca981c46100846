"""Forward integration of the two-sided stochastic Stefan book model."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import integrate

from . import _kernels
from .model import (
    CFLError,
    GridSpec,
    InitialConditionSpec,
    ModelParams,
    OrderBookDataset,
    SpecError,
    eval_sigma,
    eval_u0,
)

__all__ = [
    "BlowUpError",
    "BookState",
    "CFLError",
    "SimulationConfig",
    "SimulationResult",
    "boundary_drift",
    "diffuse_step",
    "heat_kernel",
    "initial_state",
    "reference_halfline_heat",
    "sample_increments",
    "simulate",
    "solve_deterministic",
    "step",
]


class BlowUpError(RuntimeError):
    """Boundary velocity reached the truncation threshold during a single step."""

    def __init__(self, drift: float, threshold: float):
        super().__init__(f"|dS*/dt| = {abs(drift):.6g} >= threshold {threshold:g}")
        self.drift = drift
        self.threshold = threshold


@dataclass(frozen=True)
class BookState:
    """Snapshot of the book in boundary-relative coordinates.

    ``ask_rel[j]`` and ``bid_rel[j]`` are volume *densities* at distance
    ``(j + 1) * dx`` above/below ``mid``. Dataset matrices hold these times ``dx``.
    """

    ask_rel: np.ndarray
    bid_rel: np.ndarray
    mid: float
    time: float = 0.0


@dataclass(frozen=True)
class SimulationConfig:
    grid: GridSpec
    seed: int = 0
    blowup_threshold: float = 1e6

    def __post_init__(self):
        if not self.blowup_threshold > 0:
            raise SpecError("blowup_threshold must be > 0")
        if self.seed < 0:
            raise SpecError("seed must be unsigned")


@dataclass
class SimulationResult:
    dataset: OrderBookDataset
    boundary_path: np.ndarray
    truncated: bool = False
    truncation_step: Optional[int] = None
    drift: Optional[np.ndarray] = None

    def state_at(self, row: int = -1) -> BookState:
        ds = self.dataset
        row = range(ds.n_time)[row]
        dx = ds.grid.dx
        return BookState(ds.ask[row] / dx, ds.bid[row] / dx, float(ds.mid[row]), row * ds.grid.dt)


def sample_increments(rng: np.random.Generator, count: int, grid: GridSpec) -> np.ndarray:
    """Brownian-sheet increments over ``dt x dx`` rectangles: iid N(0, dt*dx)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.normal(0.0, np.sqrt(grid.dt * grid.dx), size=count)


def diffuse_step(v, alpha: float, grid: GridSpec) -> np.ndarray:
    grid.check_cfl(alpha)
    v = np.asarray(v, dtype=float)
    return _kernels.diffuse_np(v, grid.cfl_ratio(alpha))


def boundary_drift(state: BookState, params: ModelParams, grid: GridSpec) -> float:
    """Mid-price velocity from the discrete Stefan condition."""
    dx = grid.dx
    slope_ask = (state.ask_rel[0] - 0.0) / dx
    slope_bid = (state.bid_rel[0] - 0.0) / dx
    return float((slope_ask - slope_bid) / params.rho)


def initial_state(params: ModelParams, grid: GridSpec, initial_mid: float) -> BookState:
    x = grid.nodes
    ask = np.maximum(eval_u0(params.u0_ask, x), 0.0)
    bid = np.maximum(eval_u0(params.u0_bid, x), 0.0)
    return BookState(ask, bid, float(initial_mid), 0.0)


def _noise_amplitudes(params: ModelParams, grid: GridSpec, override):
    if override is None:
        params.sigma_ask.validate_on(grid)
        params.sigma_bid.validate_on(grid)
        x = grid.nodes
        return eval_sigma(params.sigma_ask, x), eval_sigma(params.sigma_bid, x)
    amp = override if isinstance(override, tuple) else (override, override)
    n = grid.n_price
    return tuple(np.broadcast_to(np.asarray(a, dtype=float), (n,)).copy() for a in amp)


def _advance(state, params, grid, n_steps, threshold, noise, backend=None):
    grid.check_cfl(params.alpha_ask, params.alpha_bid)
    if noise is None:
        noise = (np.zeros((0, grid.n_price)), np.zeros((0, grid.n_price)))
    return _kernels.run_book(
        state.ask_rel,
        state.bid_rel,
        state.mid,
        grid.cfl_ratio(params.alpha_ask),
        grid.cfl_ratio(params.alpha_bid),
        noise[0],
        noise[1],
        grid.dx,
        grid.dt,
        params.rho,
        threshold,
        n_steps,
        backend=backend,
    )


def _draw_noise(rng, params, grid, n_steps, amplitude):
    amp_ask, amp_bid = _noise_amplitudes(params, grid, amplitude)
    if n_steps == 0:
        return None
    xi = sample_increments(rng, 2 * n_steps * grid.n_price, grid).reshape(2, n_steps, grid.n_price)
    # volume increment sigma*xi, converted to density
    return xi[0] * (amp_ask / grid.dx), xi[1] * (amp_bid / grid.dx)


def step(
    state: BookState,
    params: ModelParams,
    config: SimulationConfig,
    rng: Optional[np.random.Generator],
    *,
    amplitude=None,
) -> BookState:
    """One explicit step. ``rng=None`` means no noise.

    Raises ``BlowUpError`` when the boundary velocity reaches the threshold.
    """
    grid = config.grid
    noise = None if rng is None else _draw_noise(rng, params, grid, 1, amplitude)
    ask, bid, mid, drift, stop = _advance(state, params, grid, 1, config.blowup_threshold, noise)
    if stop >= 0:
        raise BlowUpError(float(drift[0]), config.blowup_threshold)
    return BookState(ask[1], bid[1], float(mid[1]), state.time + grid.dt)


def _package(ask, bid, mid, drift, stop, grid) -> SimulationResult:
    rows = grid.n_time if stop < 0 else stop + 1
    dx = grid.dx
    used = replace(grid, n_time=rows)
    ds = OrderBookDataset(ask[:rows] * dx, bid[:rows] * dx, mid[:rows].copy(), used)
    truncated = stop >= 0
    return SimulationResult(
        dataset=ds,
        boundary_path=mid[:rows].copy(),
        truncated=truncated,
        truncation_step=stop if truncated else None,
        drift=drift[: rows - 1 if not truncated else stop + 1].copy(),
    )


def simulate(
    params: ModelParams,
    config: SimulationConfig,
    initial_mid: float = 0.0,
    *,
    amplitude=None,
    backend: Optional[str] = None,
) -> SimulationResult:
    """Run ``n_time - 1`` stochastic steps from the sampled initial profiles.

    ``amplitude`` replaces the fitted noise scaling with a fixed per-cell
    amplitude (scalar, array, or an ``(ask, bid)`` pair); ``0.0`` turns the
    noise off while still consuming the random stream.
    """
    grid = config.grid
    grid.check_cfl(params.alpha_ask, params.alpha_bid)
    state = initial_state(params, grid, initial_mid)
    n_steps = grid.n_time - 1
    rng = np.random.default_rng(config.seed)
    noise = _draw_noise(rng, params, grid, n_steps, amplitude)
    out = _advance(state, params, grid, n_steps, config.blowup_threshold, noise, backend)
    return _package(*out, grid)


def solve_deterministic(
    params: ModelParams,
    grid: GridSpec,
    initial_mid: float = 0.0,
    *,
    blowup_threshold: float = np.inf,
    backend: Optional[str] = None,
) -> SimulationResult:
    """Noise-free solve (W = 0) of the same scheme; consumes no randomness."""
    grid.check_cfl(params.alpha_ask, params.alpha_bid)
    state = initial_state(params, grid, initial_mid)
    out = _advance(state, params, grid, grid.n_time - 1, blowup_threshold, None, backend)
    return _package(*out, grid)


def heat_kernel(t: float, z, alpha: float):
    return np.exp(-np.square(z) / (4.0 * alpha * t)) / np.sqrt(4.0 * np.pi * alpha * t)


def reference_halfline_heat(u0: InitialConditionSpec, alpha: float, t: float, x: float) -> float:
    """Dirichlet half-line heat solution at ``(t, x)`` by the method of images."""
    if not t > 0:
        raise ValueError("t must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    if x == 0:
        return 0.0
    width = 40.0 * np.sqrt(2.0 * alpha * t)
    hi = x + width

    def integrand(y):
        return (heat_kernel(t, x - y, alpha) - heat_kernel(t, x + y, alpha)) * eval_u0(u0, y)

    lo = max(0.0, x - width)
    total = 0.0
    for a, b in ((lo, x), (x, hi)):
        res = integrate.quad(integrand, a, b, epsabs=1e-12, epsrel=1e-12, limit=400, full_output=1)
        val, err = res[0], res[1]
        if len(res) > 3 or err > 1e-9:
            raise ArithmeticError(f"quadrature did not converge on [{a:g}, {b:g}]: error estimate {err:g}")
        total += val
    return float(total)

