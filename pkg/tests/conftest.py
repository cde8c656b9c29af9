import math
import os
import sys

import numpy as np
import pytest

from quasiprob.estimator import GridSpec, pattern_table_for
from quasiprob.filters import FilterSpec, build_filter_table
from quasiprob.gaussian_model import GaussianStateParams, UniformRandom, sample_dataset

@pytest.fixture(scope="session", autouse=True)
def _cache(tmp_path_factory):
    old = os.environ.get("QUASIPROB_CACHE")
    os.environ["QUASIPROB_CACHE"] = str(tmp_path_factory.mktemp("cache"))
    yield
    if old is None:
        os.environ.pop("QUASIPROB_CACHE", None)
    else:
        os.environ["QUASIPROB_CACHE"] = old


@pytest.fixture(scope="session")
def squeezed():
    """3.1 dB, 90 % detection, squeezed quadrature along phi = pi / 2."""
    return GaussianStateParams(3.1, math.pi / 2, 0j, 0.9)


@pytest.fixture(scope="session")
def small_dataset(squeezed):
    return sample_dataset(squeezed, UniformRandom(), 20_000, seed=11)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(-1.0, 1.0, -1.0, 1.0, 0.5)


@pytest.fixture(scope="session")
def inf_spec():
    return FilterSpec(math.inf, 1.3)


@pytest.fixture(scope="session")
def q8_spec():
    return FilterSpec(8, 1.3)


@pytest.fixture(scope="session")
def q8_table(q8_spec):
    return build_filter_table(q8_spec)


@pytest.fixture(scope="session")
def inf_pattern(inf_spec, small_dataset, small_grid):
    return pattern_table_for(inf_spec, small_dataset, small_grid)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
