import numpy as np
import pytest

from lobstefan.model import GridSpec, InitialConditionSpec, ModelParams, ScalingSpec


def make_params(alpha=0.5, p=(0.0, 1.0), q_ask=(3.0,), g_ask=1.5, q_bid=(2.0,), g_bid=1.0, rho=2.0,
                alpha_bid=None, p_bid=None):
    return ModelParams(
        alpha_ask=alpha,
        alpha_bid=alpha if alpha_bid is None else alpha_bid,
        sigma_ask=ScalingSpec(p),
        sigma_bid=ScalingSpec(p if p_bid is None else p_bid),
        u0_ask=InitialConditionSpec(q_ask, g_ask),
        u0_bid=InitialConditionSpec(q_bid, g_bid),
        rho=rho,
    )


def mirror_params(alpha=1.0, q=(1.0,), gamma=1.0, p=(0.0, 1.0), rho=1.0):
    return make_params(alpha=alpha, p=p, q_ask=q, g_ask=gamma, q_bid=q, g_bid=gamma, rho=rho)


@pytest.fixture
def small_grid():
    return GridSpec(dt=0.005, dx=0.1, n_time=40, n_price=30)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
