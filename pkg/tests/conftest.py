import pytest

from qvtool.fields import ParamField, ScalarField
from qvtool.model import SystemSpec, ThetaBounds


def scaled_f_system(eps=0.01, alpha=0.5, beta=2.0, theta0=1.0):
    """``f = theta``, all other coefficients one."""
    return SystemSpec(1.0, 1.0, ParamField.scale(ScalarField.constant(1.0)), 1.0,
                      T=1.0, eps=eps, theta=ThetaBounds(alpha, beta, theta0))


def root_b_system(eps=0.01, alpha=0.5, beta=2.0, theta0=1.0):
    """``b = sqrt(1 + theta)``, all other coefficients one."""
    b = ParamField.shift_root(ScalarField.constant(1.0), ScalarField.constant(1.0))
    return SystemSpec(1.0, b, 1.0, 1.0, T=1.0, eps=eps, theta=ThetaBounds(alpha, beta, theta0))


@pytest.fixture
def scaled_f():
    return scaled_f_system()


@pytest.fixture
def root_b():
    return root_b_system()
