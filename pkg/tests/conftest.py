import math

import numpy as np
import pytest

from nearopt import ModelCoefficients, PiecewiseConstant
from nearopt.presets import load_preset

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def example1():
    return load_preset("example1")


@pytest.fixture(scope="session")
def example2():
    return load_preset("example2")


SQRT2 = math.sqrt(2.0)


def random_coefficients(rng, pieces=2, scale=1.0):
    """Bounded piecewise-constant coefficients on [0, 1]."""
    def coef():
        if pieces == 1:
            return float(rng.uniform(-scale, scale))
        bp = (0.0,) + tuple(np.sort(rng.uniform(0.1, 0.9, pieces - 1)))
        return PiecewiseConstant(bp, tuple(rng.uniform(-scale, scale, pieces)))
    return ModelCoefficients(A=coef(), B=coef(), C=coef(), D=coef(), a=coef(), b=coef(), c=coef(),
                             M=float(rng.uniform(-1, 1)), x0=float(rng.uniform(-1, 1)))
