import math

import numpy as np
import pytest

from pdilearn.core import Dataset
from pdilearn.nuisance import DoseProbModel, NuisanceModels

ACCEPTANCE_LINES = {}


class ConstantDensity:
    """Dose density that returns the same value everywhere."""

    def __init__(self, value):
        self.value = value

    def density(self, a, x):
        return np.full(np.shape(np.asarray(a, dtype=float)), self.value)


def constant_mu(value, d=1):
    return DoseProbModel(math.log(value / (1 - value)), 0.0, 0.0, np.zeros(d))


def nuisance_const(mu_value, e_value, d=1):
    return NuisanceModels(ConstantDensity(e_value), constant_mu(mu_value, d))


def one_row(y, a, t_lo=0.75, t_hi=math.inf, d=1):
    return Dataset([y], [a], np.zeros((1, d)), t_lo, t_hi)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)
