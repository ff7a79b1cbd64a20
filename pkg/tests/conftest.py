import numpy as np
import pytest

from diffml import market


@pytest.fixture(scope="session")
def basket():
    return market.basket_setup(7, 0)


@pytest.fixture(scope="session")
def call():
    return market.basket_setup(1, 0)


@pytest.fixture(scope="session")
def basket_data(basket):
    model, payoff = basket
    return market.simulate_dataset(model, payoff, market.SamplingConfig(8192, 11))


def central_diff(f, x, step=1e-6):
    """Central finite-difference gradient of scalar ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x.flat[i]))
        up, dn = x.copy(), x.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        g.flat[i] = (f(up) - f(dn)) / (2 * h)
    return g


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
