"""Stochastic Stefan-problem model of a limit order book: simulation,
two-stage parameter estimation and the limit-buy decision."""
from .model import (
    CFLError,
    GridSpec,
    InitialConditionSpec,
    ModelParams,
    OrderBookDataset,
    ScalingSpec,
    SpecError,
    eval_sigma,
    eval_u0,
    nabla,
    nabla2,
)
from .simulator import (
    BookState,
    SimulationConfig,
    SimulationResult,
    simulate,
    solve_deterministic,
)

__version__ = "0.1.0"
