"""Limit-buy decision of an investor who takes the book model as given.

The ask density between the mid and the deepest stored cell is reconstructed
as a piecewise-linear profile through the stored nodes; on the first cell it
is extended linearly from the first two nodes (floored at 0). Asset amounts
and costs are exact integrals of that profile.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, optimize

from .model import GridSpec, ModelParams, ScalingSpec, eval_sigma
from .simulator import BookState


class InfeasibleBudgetError(ValueError):
    pass


class UtilityInvariantError(ValueError):
    pass


class OutOfBookError(ValueError):
    pass


class Signal(str, enum.Enum):
    BUY_NOW = "BuyNow"
    EVALUATE_FURTHER = "EvaluateFurther"


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------
class UtilityModel:
    """``U(t, L, C)`` with the partial derivatives used by the decision rules.

    Subclasses implement ``value`` and ``partials``; ``partials`` returns
    ``(U_t, U_L, U_C, U_LL, U_CC)``.
    """

    name = "custom"

    def value(self, t, L, C):
        raise NotImplementedError

    def partials(self, t, L, C):
        raise NotImplementedError

    def check(self, t, L, C):
        _, ul, uc, ull, ucc = self.partials(t, L, C)
        if not (ul > 0 and uc > 0):
            raise UtilityInvariantError(f"marginal utilities must be positive, got U_L={ul:g}, U_C={uc:g}")
        if ull > 0 or ucc > 0:
            raise UtilityInvariantError(f"utility must be concave, got U_LL={ull:g}, U_CC={ucc:g}")

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class LogUtility(UtilityModel):
    """``exp(-delta t) (a ln L + b ln C)``."""

    a: float = 1.0
    b: float = 1.0
    delta: float = 0.0
    name = "log"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.delta >= 0):
            raise ValueError("log utility needs a > 0, b > 0, delta >= 0")

    def value(self, t, L, C):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(-self.delta * t) * (self.a * np.log(L) + self.b * np.log(C))

    def partials(self, t, L, C):
        k = math.exp(-self.delta * t)
        return (
            -self.delta * k * (self.a * math.log(L) + self.b * math.log(C)),
            k * self.a / L,
            k * self.b / C,
            -k * self.a / L**2,
            -k * self.b / C**2,
        )

    def to_dict(self):
        return {"family": "log", "a": self.a, "b": self.b, "delta": self.delta}


@dataclass(frozen=True)
class PowerUtility(UtilityModel):
    """``exp(-delta t) (a L**(1-eta) + b C**(1-eta)) / (1 - eta)``, ``0 < eta != 1``."""

    a: float = 1.0
    b: float = 1.0
    eta: float = 0.5
    delta: float = 0.0
    name = "power"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.delta >= 0 and self.eta > 0 and self.eta != 1):
            raise ValueError("power utility needs a, b > 0, delta >= 0, eta > 0 and eta != 1")

    def value(self, t, L, C):
        e = 1.0 - self.eta
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(-self.delta * t) * (self.a * np.power(L, e) + self.b * np.power(C, e)) / e

    def partials(self, t, L, C):
        k = math.exp(-self.delta * t)
        eta = self.eta
        return (
            -self.delta * self.value(t, L, C),
            k * self.a * L**-eta,
            k * self.b * C**-eta,
            -k * self.a * eta * L ** (-eta - 1),
            -k * self.b * eta * C ** (-eta - 1),
        )

    def to_dict(self):
        return {"family": "power", "a": self.a, "b": self.b, "eta": self.eta, "delta": self.delta}


@dataclass(frozen=True)
class LinearUtility(UtilityModel):
    """Risk-neutral ``exp(-delta t) (a L + b C)``."""

    a: float = 1.0
    b: float = 1.0
    delta: float = 0.0
    name = "linear"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.delta >= 0):
            raise ValueError("linear utility needs a > 0, b > 0, delta >= 0")

    def value(self, t, L, C):
        return np.exp(-self.delta * t) * (self.a * np.asarray(L) + self.b * np.asarray(C))

    def partials(self, t, L, C):
        k = math.exp(-self.delta * t)
        return (-self.delta * k * (self.a * L + self.b * C), k * self.a, k * self.b, 0.0, 0.0)

    def to_dict(self):
        return {"family": "linear", "a": self.a, "b": self.b, "delta": self.delta}


UTILITY_FAMILIES = {"log": LogUtility, "power": PowerUtility, "linear": LinearUtility}


def make_utility(spec: dict) -> UtilityModel:
    spec = dict(spec)
    family = spec.pop("family", "log")
    try:
        cls = UTILITY_FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown utility family {family!r}; choose from {sorted(UTILITY_FAMILIES)}") from None
    return cls(**spec)


# ---------------------------------------------------------------------------
# book integrals
# ---------------------------------------------------------------------------
def _profile(book: BookState, dx: float):
    v = np.asarray(book.ask_rel, dtype=float)
    edge = max(2.0 * v[0] - v[1], 0.0)
    nodes = dx * np.arange(v.shape[0] + 1)
    return nodes, np.concatenate(([edge], v))


def _cumulative(nodes, vals):
    h = np.diff(nodes)
    seg_l = 0.5 * h * (vals[:-1] + vals[1:])
    x0, x1 = nodes[:-1], nodes[1:]
    seg_x = h / 6.0 * (2 * x0 * vals[:-1] + x0 * vals[1:] + x1 * vals[:-1] + 2 * x1 * vals[1:])
    return np.concatenate(([0.0], np.cumsum(seg_l))), np.concatenate(([0.0], np.cumsum(seg_x)))


def _integrals(book: BookState, B, grid: GridSpec):
    """``(L(B), int_0^B x V dx)`` for scalar or array ``B``."""
    B = np.asarray(B, dtype=float)
    dx = grid.dx
    if np.any(B < 0) or np.any(B > grid.extent * (1 + 1e-12)):
        raise OutOfBookError(f"B must lie in [0, {grid.extent:g}]")
    nodes, vals = _profile(book, dx)
    cum_l, cum_x = _cumulative(nodes, vals)
    k = np.clip(np.floor(B / dx).astype(np.int64), 0, len(nodes) - 2)
    x0 = nodes[k]
    y0, y1 = vals[k], vals[k + 1]
    h = B - x0
    yb = y0 + (y1 - y0) * (h / dx)
    part_l = 0.5 * h * (y0 + yb)
    part_x = h / 6.0 * (2 * x0 * y0 + x0 * yb + B * y0 + 2 * B * yb)
    return cum_l[k] + part_l, cum_x[k] + part_x


def density_at(book: BookState, x, grid: GridSpec):
    nodes, vals = _profile(book, grid.dx)
    return np.interp(x, nodes, vals)


def boundary_slope(book: BookState, grid: GridSpec) -> float:
    """One-sided ask slope at the mid against the Dirichlet value 0."""
    return float(book.ask_rel[0] / grid.dx)


def asset_amount(book: BookState, B, grid: GridSpec):
    L, _ = _integrals(book, B, grid)
    return L if np.ndim(L) else float(L)


def purchase_cost(book: BookState, B, grid: GridSpec):
    L, xl = _integrals(book, B, grid)
    out = book.mid * L + xl
    return out if np.ndim(out) else float(out)


def consumption(wealth: float, cost: float) -> float:
    c = wealth - cost
    if not c > 0:
        raise InfeasibleBudgetError(f"consumption W - cost = {c:g} must be > 0")
    return c


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InvestorProblem:
    wealth: float
    time: float
    book: BookState
    params: ModelParams
    grid: GridSpec

    def __post_init__(self):
        if not self.wealth > 0:
            raise InfeasibleBudgetError(f"wealth must be > 0, got {self.wealth}")


@dataclass(frozen=True)
class StaticOptimum:
    b_star: float
    asset: float
    consumption: float
    foc_residual: float
    interior: bool


@dataclass(frozen=True)
class DriftTerms:
    time: float
    liquidity: float
    asset_risk: float
    consumption_risk: float

    @property
    def total(self) -> float:
        return self.time + self.liquidity + self.asset_risk + self.consumption_risk


@dataclass(frozen=True)
class Decision:
    b_star: float
    asset: float
    consumption: float
    du_drift: float
    signal: Signal
    foc_residual: float
    chord_slope: float
    boundary_slope: float

    def to_dict(self) -> dict:
        return {
            "b_star": self.b_star,
            "asset": self.asset,
            "consumption": self.consumption,
            "du_drift": self.du_drift,
            "signal": self.signal.value,
            "foc_residual": self.foc_residual,
            "chord_slope": self.chord_slope,
            "boundary_slope": self.boundary_slope,
        }


def foc_residual(problem: InvestorProblem, utility: UtilityModel, B: float) -> float:
    """``U_L - (S* + B) U_C``; ``dU/dB`` is this times the density at ``S* + B``."""
    L = asset_amount(problem.book, B, problem.grid)
    C = consumption(problem.wealth, purchase_cost(problem.book, B, problem.grid))
    _, ul, uc, _, _ = utility.partials(problem.time, L, C)
    return ul - (problem.book.mid + B) * uc


def _budget_limit(problem: InvestorProblem) -> float:
    """Largest ``B`` in the book that leaves positive consumption."""
    grid, book = problem.grid, problem.book
    hi = grid.extent
    if problem.wealth - purchase_cost(book, hi, grid) > 0:
        return hi
    # cost is continuous with cost(0) = 0 < W; bisect on the sign of W - cost
    return optimize.brentq(lambda b: problem.wealth - purchase_cost(book, b, grid), 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def utility_curve(problem: InvestorProblem, utility: UtilityModel, B) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    L, xl = _integrals(problem.book, B, problem.grid)
    C = problem.wealth - (problem.book.mid * L + xl)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where((C > 0) & (L > 0), utility.value(problem.time, L, C), -np.inf)
    return u if u.ndim else float(u)


def static_optimal(problem: InvestorProblem, utility: UtilityModel, tol: float = 1e-10, n_scan: int = 512) -> StaticOptimum:
    """Maximise ``U(t, L(B), W - cost(B))`` over the feasible ``B``.

    Sign changes of the first-order residual from + to - are refined by
    Brent's method; with no sign change a bounded scalar maximisation of
    ``U`` is used instead. ``B* = 0`` is returned when the residual is
    already negative at the boundary.
    """
    book, grid = problem.book, problem.grid
    if book.ask_rel[0] <= 0 and book.ask_rel[1] <= 0:
        raise InfeasibleBudgetError("no ask volume next to the mid")
    b_max = _budget_limit(problem)
    if not b_max > 0:
        raise InfeasibleBudgetError("budget is exhausted at any positive B")
    # stay strictly inside (0, b_max) where L > 0 and C > 0
    eps = b_max * 1e-12
    lo, hi = eps, b_max * (1 - 1e-12) if b_max < grid.extent else b_max
    bs = np.linspace(lo, hi, n_scan)
    g = np.array([foc_residual(problem, utility, b) for b in bs])

    candidates = []
    for i in range(n_scan - 1):
        if g[i] > 0 and g[i + 1] <= 0:
            if g[i + 1] == 0:
                candidates.append(bs[i + 1])
            else:
                candidates.append(
                    optimize.brentq(lambda b: foc_residual(problem, utility, b), bs[i], bs[i + 1],
                                    xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
                )
    if not candidates:
        if g[0] <= 0:
            return _optimum(problem, utility, 0.0, interior=False)
        res = optimize.minimize_scalar(lambda b: -utility_curve(problem, utility, b), bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12})
        return _optimum(problem, utility, float(res.x), interior=False)

    vals = [float(utility_curve(problem, utility, b)) for b in candidates]
    b_star = candidates[int(np.argmax(vals))]
    opt = _optimum(problem, utility, b_star, interior=True)
    _, ul, uc, _, _ = utility.partials(problem.time, opt.asset, opt.consumption)
    if abs(opt.foc_residual) > tol * (abs(ul) + abs(uc)):
        raise ArithmeticError(f"first-order residual {opt.foc_residual:g} above tolerance at B*={b_star:g}")
    return opt


def _optimum(problem, utility, b, interior):
    L = asset_amount(problem.book, b, problem.grid)
    C = consumption(problem.wealth, purchase_cost(problem.book, b, problem.grid))
    g = foc_residual(problem, utility, b) if b > 0 else float("nan")
    return StaticOptimum(float(b), L, C, g, interior)


def risk_integrals(sigma: ScalingSpec, mid: float, B: float) -> tuple[float, float]:
    """``int_0^B sigma^2`` and ``int_0^B (S* + x)^2 sigma^2`` by adaptive quadrature."""
    if B <= 0:
        return 0.0, 0.0

    def s2(x):
        return eval_sigma(sigma, x) ** 2

    i_l, e_l = integrate.quad(s2, 0.0, B, epsabs=1e-10, epsrel=1e-12, limit=200)
    i_c, e_c = integrate.quad(lambda x: (mid + x) ** 2 * s2(x), 0.0, B, epsabs=1e-10, epsrel=1e-12, limit=200)
    return i_l, i_c


def drift_terms(problem: InvestorProblem, utility: UtilityModel, B: float) -> DriftTerms:
    """Split of the expected utility drift at ``B`` into its four terms."""
    book, grid, params = problem.book, problem.grid, problem.params
    L = asset_amount(book, B, grid)
    C = consumption(problem.wealth, purchase_cost(book, B, grid))
    utility.check(problem.time, L, C)
    ut, ul, uc, ull, ucc = utility.partials(problem.time, L, C)
    r_l, r_c = -ull / ul, -ucc / uc
    v_b = float(density_at(book, B, grid))
    liquidity = uc * params.alpha_ask * (v_b - B * boundary_slope(book, grid))
    i_l, i_c = risk_integrals(params.sigma_ask, book.mid, B)
    return DriftTerms(
        time=ut,
        liquidity=liquidity,
        asset_risk=-0.5 * uc * r_l * (book.mid + B) * i_l,
        consumption_risk=-0.5 * uc * r_c * i_c,
    )


def expected_dU_dt(problem: InvestorProblem, utility: UtilityModel, B: float) -> float:
    """Expected instantaneous utility drift at the static optimum ``B``."""
    return drift_terms(problem, utility, B).total


def timing_signal(book: BookState, b_star: float, grid: GridSpec, rtol: float = 64 * np.finfo(float).eps) -> Signal:
    """BuyNow when the chord slope to ``(S*+B*, V_A)`` does not exceed the boundary slope."""
    if not b_star > 0:
        return Signal.EVALUATE_FURTHER
    v_b = float(density_at(book, b_star, grid))
    bound = b_star * boundary_slope(book, grid)
    return Signal.BUY_NOW if v_b <= bound + rtol * abs(bound) else Signal.EVALUATE_FURTHER


def _drift_at_zero(problem: InvestorProblem, utility: UtilityModel) -> float:
    # B -> 0 limit: only the time term and alpha_A * V_A(S*+) survive
    try:
        ut, _, uc, _, _ = utility.partials(problem.time, 0.0, problem.wealth)
    except (ValueError, ZeroDivisionError):
        return float("nan")
    v0 = float(density_at(problem.book, 0.0, problem.grid))
    return ut + uc * problem.params.alpha_ask * v0


def decide(problem: InvestorProblem, utility: UtilityModel, tol: float = 1e-10) -> Decision:
    opt = static_optimal(problem, utility, tol)
    grid = problem.grid
    b = opt.b_star
    if b > 0:
        drift = expected_dU_dt(problem, utility, b)
        chord = float(density_at(problem.book, b, grid)) / b
    else:
        drift = _drift_at_zero(problem, utility)
        chord = float("nan")
    return Decision(
        b_star=b,
        asset=opt.asset,
        consumption=opt.consumption,
        du_drift=drift,
        signal=timing_signal(problem.book, b, grid),
        foc_residual=opt.foc_residual,
        chord_slope=chord,
        boundary_slope=boundary_slope(problem.book, grid),
    )
