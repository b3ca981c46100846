"""Command line entry point: ``lobstefan simulate|estimate|optimize --config PATH``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import io
from .estimation import fit_stage2, select_stage1_aic
from .investor import InfeasibleBudgetError, InvestorProblem, UtilityInvariantError, decide, make_utility
from .io import ConfigError, DataError, FitReport, RunConfig
from .model import CFLError, SpecError
from .simulator import BookState, SimulationConfig, simulate

log = logging.getLogger("lobstefan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def run_simulate(cfg: RunConfig) -> int:
    sim_cfg = SimulationConfig(cfg.grid, seed=cfg.seed, blowup_threshold=cfg.blowup_threshold)
    result = simulate(cfg.model, sim_cfg, cfg.initial_mid)
    out = cfg.output
    io.save_dataset(result.dataset, out)
    g = result.dataset.grid
    io.write_series(out / "boundary.csv", [("boundary", k * g.dt, s) for k, s in enumerate(result.boundary_path)])
    io.emit_plot_series(result, out / "plot.csv")
    io.write_json(out / "manifest.json", {
        "mode": "simulate",
        "seed": cfg.seed,
        "grid": io.grid_to_dict(cfg.grid),
        "model": io.params_to_dict(cfg.model),
        "initial_mid": cfg.initial_mid,
        "blowup_threshold": cfg.blowup_threshold,
        "truncated": result.truncated,
        "truncation_step": result.truncation_step,
        "rows_written": result.dataset.n_time,
    })
    if result.truncated:
        log.warning("boundary velocity reached %g at step %d; run truncated", cfg.blowup_threshold,
                    result.truncation_step)
    return EXIT_OK


def run_estimate(cfg: RunConfig) -> int:
    ask_p, bid_p, mid_p = cfg.data_path("ask"), cfg.data_path("bid"), cfg.data_path("mid")
    if mid_p is None and cfg.estimation.theta0 > 0:
        raise DataError("data.mid is required when theta0 > 0 (the mid path enters the boundary error)")
    dataset = io.load_dataset(ask_p, bid_p, mid_p)
    est = cfg.estimation
    s1a = select_stage1_aic(dataset.ask, dataset.grid, est, side="ask")
    s1b = select_stage1_aic(dataset.bid, dataset.grid, est, side="bid")
    s2 = fit_stage2(dataset, s1a, s1b, est)
    report = FitReport(s1a, s1b, s2, provenance={
        "config": cfg.raw,
        "dataset_sha256": io.dataset_checksum(ask_p, bid_p, mid_p),
        "grid": io.grid_to_dict(dataset.grid),
    })
    cfg.output.mkdir(parents=True, exist_ok=True)
    report.save(cfg.output / "report.json")
    io.emit_plot_series(report, cfg.output / "plot.csv")
    return EXIT_OK


def _row(n: int, row: int) -> int:
    try:
        return range(n)[row]
    except IndexError:
        raise ConfigError(f"snapshot_row {row} outside the {n} available rows") from None


def _snapshot(cfg: RunConfig):
    if cfg.data:
        dataset = io.load_dataset(cfg.data_path("ask"), cfg.data_path("bid"), cfg.data_path("mid"))
        grid = dataset.grid
        row = _row(dataset.n_time, cfg.snapshot_row)
        book = BookState(dataset.ask[row] / grid.dx, dataset.bid[row] / grid.dx, float(dataset.mid[row]),
                         row * grid.dt)
        return book, grid
    result = simulate(cfg.model, SimulationConfig(cfg.grid, seed=cfg.seed, blowup_threshold=cfg.blowup_threshold),
                      cfg.initial_mid)
    return result.state_at(_row(result.dataset.n_time, cfg.snapshot_row)), result.dataset.grid


def run_optimize(cfg: RunConfig) -> int:
    try:
        utility = make_utility(cfg.utility)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid utility: {exc}") from None
    book, grid = _snapshot(cfg)
    problem = InvestorProblem(cfg.wealth, book.time, book, cfg.model, grid)
    decision = decide(problem, utility)
    cfg.output.mkdir(parents=True, exist_ok=True)
    payload = decision.to_dict()
    payload.update({"wealth": cfg.wealth, "time": book.time, "mid": book.mid, "utility": utility.to_dict()})
    io.write_json(cfg.output / "decision.json", payload)
    io.emit_plot_series(decision, cfg.output / "plot.csv", problem=problem, utility=utility)
    return EXIT_OK


RUNNERS = {"simulate": run_simulate, "estimate": run_estimate, "optimize": run_optimize}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lobstefan", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be unsigned")
        cfg = io.load_config(args.config, seed=args.seed, out=args.out, mode=args.mode)
        raw_mode = cfg.raw.get("mode")
        if raw_mode is not None and raw_mode != args.mode:
            raise ConfigError(f"config is for mode {raw_mode!r}, command is {args.mode!r}")
        cfg.output.mkdir(parents=True, exist_ok=True)
        return RUNNERS[args.mode](cfg)
    except (ConfigError, CFLError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InfeasibleBudgetError, UtilityInvariantError, ArithmeticError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
