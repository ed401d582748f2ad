import os

import pytest

from misc import load_config
from model.cavity import CavityParams
from model.covariance import CovarianceParams

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
OMEGA = 20e6


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo ensembles")


@pytest.fixture
def signal_cavity():
    return CavityParams.from_dict(load_config(os.path.join(FIXTURES, "signal.json")))


@pytest.fixture
def idler_cavity():
    return CavityParams.from_dict(load_config(os.path.join(FIXTURES, "idler.json")))


@pytest.fixture
def paper_state():
    return CovarianceParams.from_dict(load_config(os.path.join(FIXTURES, "paper_state.json"))["params"])


@pytest.fixture
def vacuum_state():
    return CovarianceParams.from_dict(load_config(os.path.join(FIXTURES, "vacuum_state.json"))["params"])


@pytest.fixture
def paper_std_devs():
    return load_config(os.path.join(FIXTURES, "paper_state.json"))["std_devs"]
