"""Two-stage parameter estimation from order-book matrices.

Stage 1 fits the diffusivity and the noise-scaling polynomial of one side by
minimising the weighted squared Euler residuals, selecting the polynomial
degree by AIC. Stage 2 fits the initial profiles and the Stefan constant by
matching noise-free solves to the book and to the mid-price path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize

from .model import (
    SIGMA_EXPONENT,
    GridSpec,
    InitialConditionSpec,
    ModelParams,
    OrderBookDataset,
    ScalingSpec,
    SpecError,
)
from .simulator import SimulationResult, solve_deterministic

log = logging.getLogger(__name__)

_PENALTY = 1e100


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations of the fixed-diffusivity fit are rank deficient."""


@dataclass(frozen=True)
class EstimationConfig:
    degree_range_stage1: tuple[int, int] = (1, 10)
    degree_range_stage2: tuple[int, int] = (0, 4)
    theta0: float = 1.0
    optimizer_tol: float = 1e-8
    restarts: int = 5
    seed: int = 0
    stage2_max_evals: int = 4000

    def __post_init__(self):
        lo1, hi1 = self.degree_range_stage1
        lo2, hi2 = self.degree_range_stage2
        if lo1 < 1 or hi1 < lo1:
            raise SpecError(f"bad stage-1 degree range {self.degree_range_stage1}")
        if lo2 < 0 or hi2 < lo2:
            raise SpecError(f"bad stage-2 degree range {self.degree_range_stage2}")
        if self.theta0 < 0:
            raise SpecError("theta0 must be >= 0")
        if self.restarts < 1:
            raise SpecError("restarts must be >= 1")

    @property
    def stage1_degrees(self) -> range:
        return range(self.degree_range_stage1[0], self.degree_range_stage1[1] + 1)

    @property
    def stage2_degrees(self) -> range:
        return range(self.degree_range_stage2[0], self.degree_range_stage2[1] + 1)


class DegreeFit(NamedTuple):
    degree: int
    alpha: float
    coeffs: tuple
    neg2ll: float
    converged: bool = True

    @property
    def aic(self) -> float:
        return 2 * self.degree + self.neg2ll


@dataclass
class Stage1Fit:
    side: str
    alpha_hat: float
    degree_hat: int
    p_hat: tuple
    aic: float
    neg2ll: float
    per_degree_table: list = field(default_factory=list)

    def scaling_spec(self) -> ScalingSpec:
        return ScalingSpec(self.p_hat)


@dataclass
class Stage2Fit:
    q_ask_hat: InitialConditionSpec
    q_bid_hat: InitialConditionSpec
    rho_hat: float
    mse1: float
    mse2: float
    theta0: float
    objective: float
    rho_identified: bool = True
    converged: bool = True
    per_degree_table: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------
def _check_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2:
        raise ValueError(f"expected a T x N matrix, got shape {D.shape}")
    if D.shape[0] < 2 or D.shape[1] < 3:
        raise ValueError(f"need T >= 2 and N >= 3, got {D.shape}")
    return D


def _time_and_space_differences(D, grid):
    dtD = D[1:, 1:-1] - D[:-1, 1:-1]
    lap = (grid.dt / grid.dx**2) * (D[:-1, 2:] - 2.0 * D[:-1, 1:-1] + D[:-1, :-2])
    return dtD, lap


def residual_field(D, alpha: float, grid: GridSpec) -> np.ndarray:
    """Euler residuals; entry ``[t, S-1]`` uses rows ``t, t+1`` and columns ``S-1, S, S+1``."""
    dtD, lap = _time_and_space_differences(_check_matrix(D), grid)
    return dtD - alpha * lap


def residual_locations(n_price: int, dx: float) -> np.ndarray:
    """Log-price offsets ``S * dx, S = 1 .. N-2`` attached to the residual columns."""
    return dx * np.arange(1, n_price - 1)


def neg2_loglik(D, alpha: float, p, grid: GridSpec) -> float:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.shape[0] < 2:
        raise SpecError("scaling polynomial needs degree >= 1")
    D = _check_matrix(D)
    R = residual_field(D, alpha, grid)
    x = residual_locations(D.shape[1], grid.dx)
    factor = (1.0 + x * np.polynomial.polynomial.polyval(x, p)) / x**SIGMA_EXPONENT
    return float(np.sum((R * factor) ** 2))


class _Stage1Problem:
    """Column sums that make the stage-1 objective O(N) per evaluation.

    Coefficients are handled in the scaled basis ``(x / x_ref)**(j+1)``.
    """

    def __init__(self, D, grid: GridSpec):
        D = _check_matrix(D)
        a, b = _time_and_space_differences(D, grid)
        self.D = D
        self.grid = grid
        self.saa = np.sum(a * a, axis=0)
        self.sab = np.sum(a * b, axis=0)
        self.sbb = np.sum(b * b, axis=0)
        self.x = residual_locations(D.shape[1], grid.dx)
        self.x_ref = self.x[-1]
        self.w = self.x ** (-2.0 * SIGMA_EXPONENT)

    def require_curvature(self) -> None:
        if not np.any(self.sbb > 0):
            raise SingularSystemError("book has no curvature: diffusivity is not identifiable")

    def basis(self, d: int) -> np.ndarray:
        return (self.x[:, None] / self.x_ref) ** np.arange(1, d + 2)[None, :]

    def to_coeffs(self, pt: np.ndarray) -> np.ndarray:
        return pt / self.x_ref ** np.arange(1, pt.shape[0] + 1)

    def from_coeffs(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) * self.x_ref ** np.arange(1, len(p) + 1)

    def rss(self, alpha):
        return np.maximum(self.saa - 2.0 * alpha * self.sab + alpha * alpha * self.sbb, 0.0)

    def value_and_grad(self, theta, phi):
        alpha, pt = theta[0], theta[1:]
        h = 1.0 + phi @ pt
        rss = self.rss(alpha)
        wh2 = self.w * h * h
        f = float(np.sum(wh2 * rss))
        ga = float(np.sum(wh2 * (2.0 * alpha * self.sbb - 2.0 * self.sab)))
        gp = 2.0 * (self.w * h * rss) @ phi
        return f, np.concatenate(([ga], gp))

    def best_alpha(self, pt, phi) -> float:
        c = self.w * (1.0 + phi @ pt) ** 2
        den = np.sum(c * self.sbb)
        return max(float(np.sum(c * self.sab) / den), 0.0) if den > 0 else 0.0

    def best_pt(self, alpha, phi) -> np.ndarray:
        sw = np.sqrt(self.w * self.rss(alpha))
        sol, *_ = np.linalg.lstsq(sw[:, None] * phi, -sw, rcond=None)
        return sol

    def ols_alpha(self) -> float:
        return max(float(np.sum(self.sab) / np.sum(self.sbb)), 0.0)


def stage1_normal_equations(D, alpha0: float, d: int, grid: GridSpec):
    """``(A, b)`` with ``A[m, n] = sum w^2 phi_m phi_n`` and ``b[m] = sum w^2 phi_m``.

    ``w = R / x**1.6`` and ``phi_j = x**(j+1)``; the gradient of
    ``neg2_loglik`` in ``p`` is ``2 (A p + b)``.
    """
    D = _check_matrix(D)
    R = residual_field(D, alpha0, grid)
    x = residual_locations(D.shape[1], grid.dx)
    w2 = np.sum(R * R, axis=0) * x ** (-2.0 * SIGMA_EXPONENT)
    phi = x[:, None] ** np.arange(1, d + 2)[None, :]
    A = (phi * w2[:, None]).T @ phi
    b = phi.T @ w2
    return A, b


def fit_stage1_degenerate(D, alpha0: float, d: int, grid: GridSpec, *, allow_rank_deficient: bool = False) -> np.ndarray:
    """Exact minimiser over ``p`` of ``neg2_loglik`` at a known diffusivity.

    Solves the normal equations ``A p = -b`` through a least-squares solve of
    the weighted design in a rescaled monomial basis. A singular system raises
    ``SingularSystemError`` unless ``allow_rank_deficient``, in which case the
    minimum-norm minimiser (in the rescaled basis) is returned.
    """
    if d < 1:
        raise SpecError("degree must be >= 1")
    prob = _Stage1Problem(D, grid)
    phi = prob.basis(d)
    R = residual_field(prob.D, alpha0, grid)
    sw = np.sqrt(prob.w * np.sum(R * R, axis=0))
    design = sw[:, None] * phi
    sol, _, rank, sv = np.linalg.lstsq(design, -sw, rcond=None)
    if (rank < d + 1 or sv[-1] <= sv[0] * 1e-13) and not allow_rank_deficient:
        raise SingularSystemError(f"normal equations are singular for degree {d} (rank {rank})")
    return prob.to_coeffs(sol)


def _polish(prob, theta, phi, tol, max_iter=200):
    f = prob.value_and_grad(theta, phi)[0]
    for _ in range(max_iter):
        pt = prob.best_pt(theta[0], phi)
        alpha = prob.best_alpha(pt, phi)
        new = np.concatenate(([alpha], pt))
        fn = prob.value_and_grad(new, phi)[0]
        if fn > f:
            break
        done = f - fn <= tol * max(abs(f), 1e-300)
        theta, f = new, fn
        if done:
            return theta, f, True
    return theta, f, False


def fit_stage1_fixed_degree(
    D,
    d: int,
    grid: GridSpec,
    config: EstimationConfig = EstimationConfig(),
    *,
    warm_start: Optional[tuple] = None,
    _problem: Optional[_Stage1Problem] = None,
) -> DegreeFit:
    """Joint ``(alpha, p)`` minimisation of ``neg2_loglik`` for a fixed degree.

    Each start runs L-BFGS-B with the analytic gradient followed by exact
    alternating updates (both sub-problems are least squares). ``warm_start``
    is an ``(alpha, coeffs)`` pair, zero-padded to degree ``d``.
    """
    if d < 1:
        raise SpecError("degree must be >= 1")
    prob = _problem or _Stage1Problem(D, grid)
    prob.require_curvature()
    phi = prob.basis(d)
    rng = np.random.default_rng([config.seed, d])
    a_ols = prob.ols_alpha()

    starts = []
    if warm_start is not None:
        a0, c0 = warm_start
        pt0 = np.zeros(d + 1)
        c0 = prob.from_coeffs(c0)
        pt0[: len(c0)] = c0[: d + 1]
        starts.append(np.concatenate(([a0], pt0)))
    starts.append(np.concatenate(([a_ols], prob.best_pt(a_ols, phi))))
    while len(starts) < config.restarts + (warm_start is not None):
        a0 = a_ols * np.exp(rng.normal(0.0, 0.5)) if a_ols > 0 else rng.uniform(0.01, 2.0)
        starts.append(np.concatenate(([a0], rng.normal(0.0, 1.0, d + 1))))

    best = None
    any_converged = False
    bounds = [(0.0, None)] + [(None, None)] * (d + 1)
    for theta0 in starts:
        f0 = prob.value_and_grad(theta0, phi)[0]
        scale = f0 if f0 > 0 else 1.0
        res = optimize.minimize(
            lambda th: tuple(np.asarray(v) / scale for v in prob.value_and_grad(th, phi)),
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"ftol": config.optimizer_tol * 1e-4, "gtol": 1e-12, "maxiter": 2000},
        )
        theta = res.x if res.fun * scale <= f0 else theta0
        theta, f, ok = _polish(prob, theta, phi, config.optimizer_tol * 1e-4)
        any_converged |= ok or res.success
        if best is None or f < best[1]:
            best = (theta, f)

    theta = best[0]
    coeffs = prob.to_coeffs(theta[1:])
    value = neg2_loglik(prob.D, theta[0], coeffs, grid)
    if not any_converged:
        log.warning("stage-1 fit for degree %d did not converge; returning best effort", d)
    return DegreeFit(d, float(theta[0]), tuple(float(c) for c in coeffs), value, any_converged)


def select_stage1_aic(D, grid: GridSpec, config: EstimationConfig = EstimationConfig(), side: str = "ask") -> Stage1Fit:
    """Fit every degree in range and keep the smallest ``AIC = 2 d + neg2ll``.

    Each degree is warm-started from the previous one padded with a zero
    coefficient, so the fitted ``neg2ll`` never increases with the degree.
    """
    prob = _Stage1Problem(D, grid)
    table = []
    errors = []
    warm = None
    for d in config.stage1_degrees:
        try:
            fit = fit_stage1_fixed_degree(D, d, grid, config, warm_start=warm, _problem=prob)
        except (np.linalg.LinAlgError, ValueError) as exc:
            errors.append((d, exc))
            continue
        table.append(fit)
        warm = (fit.alpha, fit.coeffs)
    if not table:
        raise RuntimeError(f"stage-1 fit failed for every degree: {errors}")
    chosen = min(table, key=lambda f: (f.aic, f.degree))
    return Stage1Fit(
        side=side,
        alpha_hat=chosen.alpha,
        degree_hat=chosen.degree,
        p_hat=chosen.coeffs,
        aic=chosen.aic,
        neg2ll=chosen.neg2ll,
        per_degree_table=table,
    )


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------
def _book(x) -> OrderBookDataset:
    return x.dataset if isinstance(x, SimulationResult) else x


def mse_book(dataset: OrderBookDataset, vbar) -> float:
    model = _book(vbar)
    if dataset.ask.shape != model.ask.shape:
        raise ValueError(f"shape mismatch: data {dataset.ask.shape} vs model {model.ask.shape}")
    T, N = dataset.ask.shape
    sq = np.sum((dataset.ask - model.ask) ** 2) + np.sum((dataset.bid - model.bid) ** 2)
    return float(sq / (2 * T * N))


def boundary_slopes(book: OrderBookDataset) -> np.ndarray:
    """One-sided density slopes at the mid, ask minus bid, per row."""
    dx = book.grid.dx
    return (book.ask[:, 0] - book.bid[:, 0]) / dx**2


def mse_boundary(dataset: OrderBookDataset, vbar, rho: float) -> float:
    """Mean squared residual of the discrete Stefan condition on the mid path."""
    model = _book(vbar)
    T = dataset.n_time
    if T < 2:
        raise ValueError("need at least two rows")
    if model.n_time != T:
        raise ValueError(f"shape mismatch: data has {T} rows, model has {model.n_time}")
    velocity = np.diff(dataset.mid) / dataset.grid.dt
    resid = rho * velocity - boundary_slopes(model)[:-1]
    return float(np.mean(resid**2))


def _fit_profile(row: np.ndarray, x: np.ndarray, c: int):
    """Variable-projection fit of ``x q(x) exp(-g x)`` to one book row."""
    basis = x[:, None] ** np.arange(1, c + 2)[None, :]

    def resid(log_g):
        design = basis * np.exp(-np.exp(log_g) * x)[:, None]
        q, *_ = np.linalg.lstsq(design, row, rcond=None)
        return row - design @ q, q

    grid = np.linspace(np.log(1e-2), np.log(1e2), 61)
    errs = [np.sum(resid(g)[0] ** 2) for g in grid]
    k = int(np.argmin(errs))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(lambda g: np.sum(resid(g)[0] ** 2), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    log_g = res.x if res.fun <= errs[k] else grid[k]
    return resid(log_g)[1], float(np.exp(log_g))


class _Stage2Objective:
    def __init__(self, dataset, alpha_ask, alpha_bid, sigma_ask, sigma_bid, c_ask, c_bid, theta0):
        self.dataset = dataset
        self.alphas = (alpha_ask, alpha_bid)
        self.sigmas = (sigma_ask, sigma_bid)
        self.c = (c_ask, c_bid)
        self.theta0 = theta0
        self.cache: dict[bytes, tuple] = {}
        g = dataset.grid
        # keep every boundary move under one cell per step
        self.threshold = g.dx / g.dt

    def unpack(self, z):
        ca, cb = self.c
        qa = z[: ca + 1]
        qb = z[ca + 1 : ca + cb + 2]
        ga, gb, lr = z[ca + cb + 2 :]
        return (
            InitialConditionSpec(tuple(qa), float(np.exp(ga))),
            InitialConditionSpec(tuple(qb), float(np.exp(gb))),
            float(np.exp(lr)),
        )

    def pack(self, ua: InitialConditionSpec, ub: InitialConditionSpec, rho: float) -> np.ndarray:
        return np.concatenate((ua.coeffs, ub.coeffs, [np.log(ua.gamma), np.log(ub.gamma), np.log(rho)]))

    def terms(self, ua, ub, rho):
        params = ModelParams(self.alphas[0], self.alphas[1], self.sigmas[0], self.sigmas[1], ua, ub, rho)
        vbar = solve_deterministic(params, self.dataset.grid, float(self.dataset.mid[0]),
                                   blowup_threshold=self.threshold)
        if vbar.truncated:
            return None
        m1 = mse_book(self.dataset, vbar)
        m2 = mse_boundary(self.dataset, vbar, rho)
        return m1, m2

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            try:
                t = self.terms(*self.unpack(z))
            except (SpecError, FloatingPointError, OverflowError):
                t = None
            hit = (_PENALTY, None) if t is None else (t[0] + self.theta0 * t[1], t)
            if not np.isfinite(hit[0]):
                hit = (_PENALTY, None)
            self.cache[key] = hit
        return hit[0]


def _stefan_rho_guess(dataset: OrderBookDataset):
    v = np.diff(dataset.mid) / dataset.grid.dt
    s = boundary_slopes(dataset)[:-1]
    vv = float(np.dot(v, v))
    if vv <= 0:
        return None
    rho = float(np.dot(v, s) / vv)
    return rho if rho > 0 else None


def _nelder_mead(fun, z0, tol, max_evals):
    best_z, best_f = np.asarray(z0, float), fun(z0)
    evals = 0
    while evals < max_evals:
        res = optimize.minimize(fun, best_z, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": tol * max(best_f, 1e-30),
                                         "maxfev": max_evals - evals, "adaptive": True})
        evals += res.nfev
        improved = res.fun < best_f - tol * max(abs(best_f), 1e-30)
        if res.fun < best_f:
            best_z, best_f = res.x, res.fun
        if not improved:
            return best_z, best_f, True
    return best_z, best_f, False


def fit_stage2(
    dataset: OrderBookDataset,
    stage1_ask: Stage1Fit,
    stage1_bid: Stage1Fit,
    config: EstimationConfig = EstimationConfig(),
) -> Stage2Fit:
    """Search ``(c_A, c_B)`` exhaustively and the continuous parameters by
    multi-start Nelder-Mead, minimising ``c_A + c_B + MSE1 + theta0 * MSE2``.
    """
    grid = dataset.grid
    grid.check_cfl(stage1_ask.alpha_hat, stage1_bid.alpha_hat)
    x = grid.nodes
    rho_guess = _stefan_rho_guess(dataset) if config.theta0 > 0 else None
    rho_identified = rho_guess is not None
    rho0 = rho_guess if rho_guess is not None else 1.0
    placeholder = ScalingSpec((0.0, 1.0))  # noise scaling is unused when W = 0

    table = []
    best = None
    for ca in config.stage2_degrees:
        for cb in config.stage2_degrees:
            obj = _Stage2Objective(dataset, stage1_ask.alpha_hat, stage1_bid.alpha_hat,
                                   placeholder, placeholder, ca, cb, config.theta0)
            qa, ga = _fit_profile(dataset.ask[0] / grid.dx, x, ca)
            qb, gb = _fit_profile(dataset.bid[0] / grid.dx, x, cb)
            z_data = obj.pack(InitialConditionSpec(tuple(qa), ga), InitialConditionSpec(tuple(qb), gb), rho0)
            rng = np.random.default_rng([config.seed, ca, cb])
            starts = [z_data]
            for _ in range(config.restarts - 1):
                jitter = rng.normal(0.0, 0.2, z_data.shape)
                starts.append(z_data + jitter * np.maximum(np.abs(z_data), 0.1))
            per_start = max(config.stage2_max_evals // len(starts), 50)
            cand = None
            converged = False
            for z0 in starts:
                z, f, ok = _nelder_mead(obj, z0, config.optimizer_tol, per_start)
                converged |= ok
                if cand is None or f < cand[1]:
                    cand = (z, f)
            z, f = cand
            total = ca + cb + f
            table.append({"c_ask": ca, "c_bid": cb, "mse": float(f), "objective": float(total)})
            log.debug("stage-2 degrees (%d, %d): objective %.6g", ca, cb, total)
            if f < _PENALTY and (best is None or total < best[0]):
                best = (total, obj, z, converged)

    if best is None:
        raise RuntimeError("stage-2 search found no candidate with a complete noise-free solve")
    _, obj, z, converged = best
    ua, ub, rho = obj.unpack(z)
    m1, m2 = obj.terms(ua, ub, rho)
    ca, cb = obj.c
    return Stage2Fit(
        q_ask_hat=ua,
        q_bid_hat=ub,
        rho_hat=rho,
        mse1=m1,
        mse2=m2,
        theta0=config.theta0,
        objective=ca + cb + m1 + config.theta0 * m2,
        rho_identified=rho_identified,
        converged=converged,
        per_degree_table=table,
    )


def stage2_objective(dataset, alpha_ask, alpha_bid, u0_ask, u0_bid, rho, theta0) -> float:
    """``c_A + c_B + MSE1 + theta0 * MSE2`` at explicit parameters."""
    placeholder = ScalingSpec((0.0, 1.0))
    obj = _Stage2Objective(dataset, alpha_ask, alpha_bid, placeholder, placeholder,
                           u0_ask.degree, u0_bid.degree, theta0)
    t = obj.terms(u0_ask, u0_bid, rho)
    if t is None:
        return np.inf
    return u0_ask.degree + u0_bid.degree + t[0] + theta0 * t[1]
