import time

import numpy as np
import pytest

from scheddev.datasets import ToySpec, sample_toy
from scheddev.schedules import LogLinearVE
from scheddev.tinyflow import TinyFlowRegressor


@pytest.fixture(scope="session")
def toy_schedule():
    return LogLinearVE(8e-3, 10.0)


@pytest.fixture(scope="session")
def paper_schedule():
    return LogLinearVE(5e-4, 5.0)


@pytest.fixture(scope="session")
def toy_data():
    return sample_toy(ToySpec(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def trained_regressor(toy_data):
    """The full-size network trained once per session on the discrete toy data."""
    t0 = time.perf_counter()
    reg = TinyFlowRegressor(random_state=0).fit(toy_data)
    reg.fit_seconds_ = time.perf_counter() - t0
    return reg
