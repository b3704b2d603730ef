import numpy as np
import pytest

from tetel.data import LongitudinalDataset
from tetel.moments import MeanSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_dataset(rng, n=30, m=3, q=2, slope=0.5):
    """Random-intercept linear data with an intercept column and one covariate."""
    X = np.concatenate([np.ones((n, m, 1)), rng.standard_normal((n, m, q - 1))], axis=-1)
    beta = np.r_[1.0, np.full(q - 1, slope)]
    y = X @ beta + rng.standard_normal((n, 1)) + rng.standard_normal((n, m))
    return LongitudinalDataset(y, X, np.arange(1.0, m + 1))


@pytest.fixture
def dataset(rng):
    return small_dataset(rng)


@pytest.fixture
def spec2():
    return MeanSpec(2)


def pytest_terminal_summary(terminalreporter):
    from ._acceptance_log import VERDICTS, line

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(line(k))
