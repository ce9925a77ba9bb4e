import numpy as np
import pytest

from w2clt.measures import DiscreteMeasure, SamplableMeasure


@pytest.fixture
def two_point_sym():
    return DiscreteMeasure([[-1.0], [1.0]])


@pytest.fixture
def two_point_shifted():
    return DiscreteMeasure([[0.0], [2.0]])


@pytest.fixture
def unif_pm1():
    return SamplableMeasure("uniform-box", 1, {"low": [-1.0], "high": [1.0]})


@pytest.fixture
def gapped_q():
    return SamplableMeasure("piecewise-uniform-1d", 1, {"intervals": [[-1.1, -0.1], [0.1, 1.1]]})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
