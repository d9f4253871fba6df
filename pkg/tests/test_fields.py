import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvtool.errors import ConfigurationError
from qvtool.fields import ParamField, ScalarField, as_field, field_from_dict

ALL_SCALAR = [
    ScalarField.constant(2.5),
    ScalarField.linear(1.0, 0.5),
    ScalarField.polynomial([1.0, -2.0, 3.0]),
    ScalarField.sinusoid(1.0, 0.3, 4.0, 0.2),
    ScalarField.tabulated([0.0, 0.25, 0.5, 0.75, 1.0], [1.0, 1.2, 0.9, 1.1, 1.3]),
]


@pytest.mark.parametrize("fld", ALL_SCALAR, ids=lambda f: f.family)
def test_time_derivative_matches_central_differences(fld):
    t = np.linspace(0.05, 0.95, 19)
    d = 1e-6
    fd = (fld(t + d) - fld(t - d)) / (2 * d)
    assert np.allclose(fld.derivative(t), fd, atol=1e-6)


def test_c1_field_finite_difference_converges_at_first_order():
    # a tabulated field is C2, so one-sided differences have error ~ step
    fld = ALL_SCALAR[-1]
    t = 0.4
    errs = [abs((fld(t + d) - fld(t)) / d - fld.derivative(t)) for d in (1e-2, 5e-3, 2.5e-3)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(1.6 < r < 2.4 for r in ratios)


def test_tabulated_interpolates_knots_and_is_cubic_between():
    knots = np.linspace(0, 1, 6)
    fld = ScalarField.tabulated(knots, knots ** 3)
    assert np.allclose(fld(knots), knots ** 3)
    # a not-a-knot cubic spline reproduces a cubic exactly
    assert np.allclose(fld(np.linspace(0, 1, 37)), np.linspace(0, 1, 37) ** 3)


def test_tabulated_rejects_unsorted_knots():
    with pytest.raises(ConfigurationError):
        ScalarField.tabulated([0.0, 0.5, 0.4], [1, 2, 3])


@pytest.mark.parametrize("fld", [
    ParamField.scale(ScalarField.linear(1.0, 1.0)),
    ParamField.shift_root(ScalarField.constant(1.0), ScalarField.linear(0.5, 1.0)),
    ParamField.poly_theta([ScalarField.constant(1.0), ScalarField.linear(0.0, 1.0),
                           ScalarField.constant(0.5)]),
], ids=["scale", "shift_root", "poly_theta"])
def test_theta_derivatives_match_finite_differences(fld):
    t = np.linspace(0.0, 1.0, 11)
    th = 1.3
    for step in (1e-3, 1e-4):
        d1 = (fld.value(t, th + step) - fld.value(t, th - step)) / (2 * step)
        d2 = (fld.value(t, th + step) - 2 * fld.value(t, th) + fld.value(t, th - step)) / step ** 2
        assert np.allclose(fld.dtheta(t, th), d1, atol=10 * step ** 2)
        assert np.allclose(fld.d2theta(t, th), d2, atol=1e-6 + 10 * step ** 2)


def test_scalar_field_has_zero_theta_derivatives():
    fld = ScalarField.sinusoid(1, 1, 1)
    assert np.all(fld.dtheta(np.linspace(0, 1, 5), 2.0) == 0)
    assert not fld.is_parametric


def test_parametric_field_needs_theta():
    with pytest.raises(ConfigurationError):
        ParamField.scale(ScalarField.constant(1.0)).value(0.5)


@pytest.mark.parametrize("fld", ALL_SCALAR + [
    ParamField.scale(ScalarField.constant(2.0)),
    ParamField.shift_root(ScalarField.constant(1.0), ScalarField.constant(3.0)),
    ParamField.poly_theta([ScalarField.constant(1.0), ScalarField.linear(1.0, 2.0)]),
], ids=lambda f: f.family)
def test_dict_round_trip(fld):
    back = field_from_dict(fld.to_dict())
    t = np.linspace(0, 1, 7)
    assert np.array_equal(back.value(t, 1.1), fld.value(t, 1.1))


def test_bare_number_is_constant_field():
    assert as_field(3)(0.7) == 3.0
    assert field_from_dict(2.0)(np.zeros(3)).tolist() == [2.0, 2.0, 2.0]


@settings(max_examples=50, deadline=None)
@given(th=st.floats(0.1, 5.0), t=st.floats(0.0, 1.0))
def test_shift_root_squares_to_affine_in_theta(th, t):
    h, g = ScalarField.linear(1.0, 0.5), ScalarField.constant(2.0)
    fld = ParamField.shift_root(h, g)
    assert fld.value(t, th) ** 2 == pytest.approx(h(t) + th * g(t), rel=1e-12)
