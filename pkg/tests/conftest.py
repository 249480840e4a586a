import numpy as np
import pytest

from sdotflow.sdot import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def normal_quantile_points(n: int) -> np.ndarray:
    """Cell centres for an n-point 1D quantile problem (conditional means would also do)."""
    from scipy.stats import norm
    return norm.ppf((np.arange(n) + 0.5) / n)


@pytest.fixture
def quantile_dataset():
    return Dataset.uniform(normal_quantile_points(8).reshape(-1, 1))


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
