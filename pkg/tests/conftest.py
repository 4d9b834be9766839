import numpy as np
import pytest

from homoglab.field import LagrangianSpec

CHECKERBOARD = {"dimension": 2, "family": "quadratic", "phases": [1.0, 4.0],
                "probs": [0.5, 0.5], "lambda": 4.0}
LAMINATE = dict(CHECKERBOARD, structure="periodic-laminate")


@pytest.fixture
def identity_spec():
    return LagrangianSpec(2, "quadratic", (1.0,), (1.0,), Lambda=1.0)


@pytest.fixture
def aniso_spec():
    return LagrangianSpec(2, "quadratic", (np.diag([1.0, 4.0]),), (1.0,), Lambda=4.0)


@pytest.fixture
def checkerboard_spec():
    return LagrangianSpec.from_dict(CHECKERBOARD)


@pytest.fixture
def laminate_spec():
    return LagrangianSpec.from_dict(LAMINATE)


@pytest.fixture
def perturbed_spec():
    return LagrangianSpec(2, "quadratic-plus-perturbation", (1.0, 2.0), (0.5, 0.5),
                          kappa=0.5, Lambda=2.5)
