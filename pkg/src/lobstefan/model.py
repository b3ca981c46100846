"""Domain types, the noise-scaling and initial-profile families, and the
difference operators shared by the simulator and the estimators.

Price coordinates are log-prices. Book profiles relative to the mid-price are
sampled at ``x_j = (j + 1) * dx`` for ``j = 0 .. N-1``; the boundary ``x = 0``
carries the Dirichlet value 0 and is never stored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

#: Fixed exponent of the noise-scaling family.
SIGMA_EXPONENT = 1.6


class SpecError(ValueError):
    """Invalid model parameters, or evaluation outside their domain."""


class CFLError(ValueError):
    """Explicit-scheme stability bound violated."""


def horner(coeffs: Sequence[float], x):
    """Evaluate ``sum_j coeffs[j] * x**j`` (lowest degree first)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ScalingSpec:
    """Polynomial ``p`` of the noise scaling ``sigma(x) = x**1.6 / (1 + x p(x))``."""

    coeffs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if len(self.coeffs) < 2:
            raise SpecError("scaling polynomial needs degree >= 1")
        if not all(np.isfinite(self.coeffs)):
            raise SpecError("non-finite scaling coefficient")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def denominator(self, x):
        return 1.0 + np.asarray(x, dtype=float) * horner(self.coeffs, x)

    def validate_on(self, grid: "GridSpec") -> None:
        """Reject specs whose denominator is not positive on the grid nodes."""
        den = self.denominator(grid.nodes)
        if np.any(den <= 0):
            bad = grid.nodes[np.argmax(den <= 0)]
            raise SpecError(f"1 + x p(x) <= 0 at x={bad:g}")


@dataclass(frozen=True)
class InitialConditionSpec:
    """Initial profile ``u0(x) = x q(x) exp(-gamma x)``."""

    coeffs: tuple[float, ...]
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if len(self.coeffs) < 1:
            raise SpecError("initial-profile polynomial needs at least one coefficient")
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise SpecError(f"gamma must be > 0, got {self.gamma}")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1


@dataclass(frozen=True)
class GridSpec:
    dt: float
    dx: float
    n_time: int
    n_price: int

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise SpecError("grid steps must be positive")
        if self.n_time < 1:
            raise SpecError("n_time must be >= 1")
        if self.n_price < 3:
            raise SpecError("n_price must be >= 3")

    @property
    def nodes(self) -> np.ndarray:
        """Relative log-price of each stored cell, ``dx * (1..N)``."""
        return self.dx * np.arange(1, self.n_price + 1)

    @property
    def extent(self) -> float:
        return self.dx * self.n_price

    def cfl_ratio(self, alpha: float) -> float:
        return alpha * self.dt / self.dx**2

    def check_cfl(self, *alphas: float) -> None:
        worst = max(alphas)
        if self.cfl_ratio(worst) > 0.5 + 1e-12:
            raise CFLError(
                f"alpha*dt/dx^2 = {self.cfl_ratio(worst):.6g} exceeds 1/2 "
                f"(alpha={worst:g}, dt={self.dt:g}, dx={self.dx:g})"
            )


@dataclass(frozen=True)
class ModelParams:
    alpha_ask: float
    alpha_bid: float
    sigma_ask: ScalingSpec
    sigma_bid: ScalingSpec
    u0_ask: InitialConditionSpec
    u0_bid: InitialConditionSpec
    rho: float

    def __post_init__(self):
        for name in ("alpha_ask", "alpha_bid", "rho"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise SpecError(f"{name} must be finite and > 0, got {v}")


@dataclass
class OrderBookDataset:
    """Boundary-relative book matrices.

    ``ask[t, j]`` and ``bid[t, j]`` are cell volumes (density times ``dx``) at
    relative distance ``(j + 1) * dx`` from ``mid[t]``.
    """

    ask: np.ndarray
    bid: np.ndarray
    mid: np.ndarray
    grid: GridSpec = field(repr=False)

    def __post_init__(self):
        self.ask = np.asarray(self.ask, dtype=float)
        self.bid = np.asarray(self.bid, dtype=float)
        self.mid = np.asarray(self.mid, dtype=float).reshape(-1)
        if self.ask.ndim != 2 or self.ask.shape != self.bid.shape:
            raise SpecError(f"ask/bid shapes differ: {self.ask.shape} vs {self.bid.shape}")
        if self.ask.shape[0] != self.mid.shape[0]:
            raise SpecError(
                f"book has {self.ask.shape[0]} rows but mid has {self.mid.shape[0]}"
            )
        if (self.ask < 0).any() or (self.bid < 0).any():
            raise SpecError("negative volume in book")

    @property
    def n_time(self) -> int:
        return self.ask.shape[0]

    @property
    def n_price(self) -> int:
        return self.ask.shape[1]


def eval_sigma(spec: ScalingSpec, x):
    """Noise amplitude ``x**1.6 / (1 + x p(x))``; scalar or array ``x >= 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise SpecError("sigma is defined for x >= 0 only")
    den = 1.0 + x * horner(spec.coeffs, x)
    if np.any(den <= 0):
        raise SpecError("1 + x p(x) <= 0: scaling function is singular or negative here")
    out = x**SIGMA_EXPONENT / den
    return out if np.ndim(out) else float(out)


def eval_u0(spec: InitialConditionSpec, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise SpecError("u0 is defined for x >= 0 only")
    out = x * horner(spec.coeffs, x) * np.exp(-spec.gamma * x)
    return out if np.ndim(out) else float(out)


def nabla(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError("nabla needs a vector of length >= 2")
    return v[1:] - v[:-1]


def nabla2(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] < 3:
        raise ValueError("nabla2 needs a vector of length >= 3")
    return nabla(nabla(v))
