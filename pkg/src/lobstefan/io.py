"""CSV/JSON serialisation of datasets, fits and run configurations."""
from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .estimation import DegreeFit, EstimationConfig, Stage1Fit, Stage2Fit
from .model import (
    GridSpec,
    InitialConditionSpec,
    ModelParams,
    OrderBookDataset,
    ScalingSpec,
    SpecError,
)

FLOAT_FMT = "{:.17g}"
_HEADER = re.compile(r"^#\s*dt=(?P<dt>\S+)\s+dx=(?P<dx>\S+)\s*$")
MODES = ("simulate", "estimate", "optimize")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def fmt(v: float) -> str:
    return FLOAT_FMT.format(float(v))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
def _write_matrix(path: Path, rows: np.ndarray, grid: GridSpec) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# dt={fmt(grid.dt)} dx={fmt(grid.dx)}\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(fmt(v) for v in row) + "\n")


def save_dataset(dataset: OrderBookDataset, directory, names=("ask.csv", "bid.csv", "mid.csv")) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / n for n in names]
    _write_matrix(paths[0], dataset.ask, dataset.grid)
    _write_matrix(paths[1], dataset.bid, dataset.grid)
    _write_matrix(paths[2], dataset.mid.reshape(-1, 1), dataset.grid)
    return paths


def read_matrix(path) -> tuple[np.ndarray, Optional[tuple[float, float]]]:
    """Parse a comma-separated matrix; returns ``(values, (dt, dx) or None)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    meta = None
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                m = _HEADER.match(text)
                if m and meta is None:
                    try:
                        meta = (float(m["dt"]), float(m["dx"]))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: malformed grid header {text!r}") from None
                continue
            cells = next(csv.reader([text]))
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(cells)}")
            row = []
            for col, cell in enumerate(cells, start=1):
                try:
                    row.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: cannot parse {cell!r}") from None
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=float), meta


def load_dataset(ask_path, bid_path, mid_path=None, dt: Optional[float] = None, dx: Optional[float] = None) -> OrderBookDataset:
    """Load and validate a dataset. Grid steps come from the file headers
    unless given explicitly. Without ``mid_path`` the mid path is all zeros."""
    ask, meta_a = read_matrix(ask_path)
    bid, meta_b = read_matrix(bid_path)
    if ask.shape != bid.shape:
        raise DataError(f"shape mismatch: ask is {ask.shape[0]}x{ask.shape[1]}, bid is {bid.shape[0]}x{bid.shape[1]}")
    if mid_path is not None:
        mid, _ = read_matrix(mid_path)
        if mid.shape[1] != 1:
            raise DataError(f"{mid_path}: expected one value per line, found {mid.shape[1]} columns")
        mid = mid[:, 0]
        if mid.shape[0] != ask.shape[0]:
            raise DataError(f"shape mismatch: ask has {ask.shape[0]} rows but mid has {mid.shape[0]}")
    else:
        mid = np.zeros(ask.shape[0])
    meta = meta_a or meta_b
    if meta_a and meta_b and meta_a != meta_b:
        raise DataError(f"grid headers disagree: ask {meta_a} vs bid {meta_b}")
    if dt is None or dx is None:
        if meta is None:
            raise DataError("grid steps missing: no '# dt=... dx=...' header and none given")
        dt = meta[0] if dt is None else dt
        dx = meta[1] if dx is None else dx
    for name, m in (("ask", ask), ("bid", bid)):
        if (m < 0).any():
            r, c = np.argwhere(m < 0)[0]
            raise DataError(f"negative volume in {name} at row {r + 1}, column {c + 1}")
        if not np.isfinite(m).all():
            raise DataError(f"non-finite value in {name}")
    try:
        grid = GridSpec(float(dt), float(dx), ask.shape[0], ask.shape[1])
        return OrderBookDataset(ask, bid, mid, grid)
    except SpecError as exc:
        raise DataError(str(exc)) from None


def dataset_checksum(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_series(path, rows: Iterable[tuple]) -> None:
    """Tidy ``series,x,y`` CSV."""
    with open(path, "w", newline="") as fh:
        fh.write("series,x,y\n")
        for name, x, y in rows:
            fh.write(f"{name},{fmt(x)},{fmt(y)}\n")


def read_series(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["series", "x", "y"]:
            raise DataError(f"{path}: unexpected header {header}")
        return [(r[0], float(r[1]), float(r[2])) for r in reader if r]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------
def params_to_dict(p: ModelParams) -> dict:
    return {
        "alpha_ask": p.alpha_ask,
        "alpha_bid": p.alpha_bid,
        "sigma_ask": {"coeffs": list(p.sigma_ask.coeffs)},
        "sigma_bid": {"coeffs": list(p.sigma_bid.coeffs)},
        "u0_ask": {"coeffs": list(p.u0_ask.coeffs), "gamma": p.u0_ask.gamma},
        "u0_bid": {"coeffs": list(p.u0_bid.coeffs), "gamma": p.u0_bid.gamma},
        "rho": p.rho,
    }


def _coeffs(d, key):
    v = d[key]
    return v["coeffs"] if isinstance(v, dict) else v


def params_from_dict(d: dict) -> ModelParams:
    try:
        return ModelParams(
            alpha_ask=float(d["alpha_ask"]),
            alpha_bid=float(d["alpha_bid"]),
            sigma_ask=ScalingSpec(_coeffs(d, "sigma_ask")),
            sigma_bid=ScalingSpec(_coeffs(d, "sigma_bid")),
            u0_ask=InitialConditionSpec(d["u0_ask"]["coeffs"], float(d["u0_ask"]["gamma"])),
            u0_bid=InitialConditionSpec(d["u0_bid"]["coeffs"], float(d["u0_bid"]["gamma"])),
            rho=float(d["rho"]),
        )
    except KeyError as exc:
        raise ConfigError(f"model is missing field {exc.args[0]!r}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid model: {exc}") from None


def grid_to_dict(g: GridSpec) -> dict:
    return {"dt": g.dt, "dx": g.dx, "n_time": g.n_time, "n_price": g.n_price}


def grid_from_dict(d: dict) -> GridSpec:
    try:
        return GridSpec(float(d["dt"]), float(d["dx"]), int(d["n_time"]), int(d["n_price"]))
    except KeyError as exc:
        raise ConfigError(f"grid is missing field {exc.args[0]!r}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid grid: {exc}") from None


# ---------------------------------------------------------------------------
# fit report
# ---------------------------------------------------------------------------
def _stage1_to_dict(f: Stage1Fit) -> dict:
    return {
        "side": f.side,
        "alpha_hat": f.alpha_hat,
        "degree_hat": f.degree_hat,
        "p_hat": list(f.p_hat),
        "aic": f.aic,
        "neg2ll": f.neg2ll,
        "per_degree_table": [
            {"degree": r.degree, "alpha": r.alpha, "coeffs": list(r.coeffs), "neg2ll": r.neg2ll,
             "aic": r.aic, "converged": r.converged}
            for r in f.per_degree_table
        ],
    }


def _stage1_from_dict(d: dict) -> Stage1Fit:
    return Stage1Fit(
        side=d["side"],
        alpha_hat=d["alpha_hat"],
        degree_hat=d["degree_hat"],
        p_hat=tuple(d["p_hat"]),
        aic=d["aic"],
        neg2ll=d["neg2ll"],
        per_degree_table=[
            DegreeFit(r["degree"], r["alpha"], tuple(r["coeffs"]), r["neg2ll"], r["converged"])
            for r in d["per_degree_table"]
        ],
    )


def _stage2_to_dict(f: Stage2Fit) -> dict:
    return {
        "q_ask_hat": {"coeffs": list(f.q_ask_hat.coeffs), "gamma": f.q_ask_hat.gamma},
        "q_bid_hat": {"coeffs": list(f.q_bid_hat.coeffs), "gamma": f.q_bid_hat.gamma},
        "rho_hat": f.rho_hat,
        "rho_identified": f.rho_identified,
        "mse1": f.mse1,
        "mse2": f.mse2,
        "theta0": f.theta0,
        "objective": f.objective,
        "converged": f.converged,
        "per_degree_table": [{k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()}
                             for r in f.per_degree_table],
    }


def _stage2_from_dict(d: dict) -> Stage2Fit:
    return Stage2Fit(
        q_ask_hat=InitialConditionSpec(d["q_ask_hat"]["coeffs"], d["q_ask_hat"]["gamma"]),
        q_bid_hat=InitialConditionSpec(d["q_bid_hat"]["coeffs"], d["q_bid_hat"]["gamma"]),
        rho_hat=d["rho_hat"],
        mse1=d["mse1"],
        mse2=d["mse2"],
        theta0=d["theta0"],
        objective=d["objective"],
        rho_identified=d["rho_identified"],
        converged=d["converged"],
        per_degree_table=list(d["per_degree_table"]),
    )


@dataclass
class FitReport:
    stage1_ask: Stage1Fit
    stage1_bid: Stage1Fit
    stage2: Stage2Fit
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage1": {"ask": _stage1_to_dict(self.stage1_ask), "bid": _stage1_to_dict(self.stage1_bid)},
            "stage2": _stage2_to_dict(self.stage2),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(
            stage1_ask=_stage1_from_dict(d["stage1"]["ask"]),
            stage1_bid=_stage1_from_dict(d["stage1"]["bid"]),
            stage2=_stage2_from_dict(d["stage2"]),
            provenance=d.get("provenance", {}),
        )

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FitReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------
@dataclass
class RunConfig:
    mode: str
    base_dir: Path
    output: Path
    seed: int = 0
    grid: Optional[GridSpec] = None
    model: Optional[ModelParams] = None
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    utility: dict = field(default_factory=lambda: {"family": "log"})
    wealth: Optional[float] = None
    initial_mid: float = 0.0
    blowup_threshold: float = 1e6
    data: dict = field(default_factory=dict)
    snapshot_row: int = -1
    raw: dict = field(default_factory=dict)

    def data_path(self, key: str) -> Optional[Path]:
        v = self.data.get(key)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p


def _estimation_from_dict(d: dict) -> EstimationConfig:
    kw = dict(d)
    for key in ("degree_range_stage1", "degree_range_stage2"):
        if key in kw:
            kw[key] = tuple(int(v) for v in kw[key])
    try:
        return EstimationConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"invalid estimation settings: {exc}") from None
    except SpecError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, *, seed: Optional[int] = None, out: Optional[str] = None, mode: Optional[str] = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    mode = mode or raw.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"] = out
    base = path.parent
    output = Path(raw.get("output", "out"))
    cfg = RunConfig(mode=mode, base_dir=base, output=output if output.is_absolute() else base / output, raw=raw)

    s = raw.get("seed", 0)
    if not isinstance(s, int) or s < 0:
        raise ConfigError(f"seed must be an unsigned integer, got {s!r}")
    cfg.seed = s
    if "grid" in raw:
        cfg.grid = grid_from_dict(raw["grid"])
    if "model" in raw:
        cfg.model = params_from_dict(raw["model"])
    if "estimation" in raw:
        cfg.estimation = _estimation_from_dict(raw["estimation"])
    try:
        sim = raw.get("simulation", {})
        cfg.initial_mid = float(sim.get("initial_mid", 0.0))
        cfg.blowup_threshold = float(sim.get("blowup_threshold", 1e6))
        cfg.data = dict(raw.get("data", {}))
        cfg.snapshot_row = int(raw.get("snapshot_row", -1))
        if "utility" in raw:
            cfg.utility = dict(raw["utility"])
        if "wealth" in raw:
            cfg.wealth = float(raw["wealth"])
    except (AttributeError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed field: {exc}") from None
    if not cfg.blowup_threshold > 0:
        raise ConfigError("simulation.blowup_threshold must be > 0")

    if mode == "simulate":
        if cfg.model is None or cfg.grid is None:
            raise ConfigError("simulate needs 'model' and 'grid'")
    elif mode == "estimate":
        if "ask" not in cfg.data or "bid" not in cfg.data:
            raise ConfigError("estimate needs data.ask and data.bid paths")
    elif mode == "optimize":
        if cfg.wealth is None or not cfg.wealth > 0:
            raise ConfigError(f"optimize needs wealth > 0, got {cfg.wealth!r}")
        if cfg.model is None:
            raise ConfigError("optimize needs 'model' (diffusivity and noise scaling)")
        if not cfg.data and cfg.grid is None:
            raise ConfigError("optimize needs either data paths or a grid to simulate a snapshot")
    if cfg.model is not None and cfg.grid is not None:
        try:
            cfg.grid.check_cfl(cfg.model.alpha_ask, cfg.model.alpha_bid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# plot series
# ---------------------------------------------------------------------------
def simulation_series(result) -> list[tuple]:
    ds = result.dataset
    g = ds.grid
    rows = [("boundary", k * g.dt, s) for k, s in enumerate(result.boundary_path)]
    x = g.nodes
    for name, book in (("ask_initial", ds.ask[0]), ("bid_initial", ds.bid[0]),
                       ("ask_final", ds.ask[-1]), ("bid_final", ds.bid[-1])):
        rows += [(name, xi, v / g.dx) for xi, v in zip(x, book)]
    return rows


def report_series(report: FitReport) -> list[tuple]:
    rows = []
    for side, fit in (("ask", report.stage1_ask), ("bid", report.stage1_bid)):
        rows += [(f"aic_{side}", r.degree, r.aic) for r in fit.per_degree_table]
    rows += [(f"stage2_objective_cask{r['c_ask']}", r["c_bid"], r["objective"])
             for r in report.stage2.per_degree_table]
    return rows


def decision_series(problem, utility, decision, n: int = 401) -> list[tuple]:
    """Utility and first-order residual along ``B``, the ask profile, and the
    chord/boundary slopes compared by the timing rule."""
    from .investor import _budget_limit, foc_residual, utility_curve

    b_max = _budget_limit(problem)
    bs = np.linspace(0.0, b_max, n)[1:-1]
    us = utility_curve(problem, utility, bs)
    rows = [("utility", b, u) for b, u in zip(bs, us)]
    rows += [("foc_residual", b, foc_residual(problem, utility, b)) for b in bs]
    g = problem.grid
    rows += [("ask_profile", x, v) for x, v in zip(g.nodes, problem.book.ask_rel)]
    rows.append(("chord_slope", decision.b_star, decision.chord_slope))
    rows.append(("boundary_slope", decision.b_star, decision.boundary_slope))
    return rows


def emit_plot_series(obj, path, **kw) -> None:
    from .investor import Decision
    from .simulator import SimulationResult

    if isinstance(obj, SimulationResult):
        rows = simulation_series(obj)
    elif isinstance(obj, FitReport):
        rows = report_series(obj)
    elif isinstance(obj, Decision):
        rows = decision_series(kw["problem"], kw["utility"], obj)
    else:
        raise TypeError(f"no plot series for {type(obj).__name__}")
    write_series(path, rows)
