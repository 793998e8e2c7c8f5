import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from certbound.dynamics import (
    BlowUpError,
    VectorField,
    integrate,
    integrate_many,
    lie_derivative,
    rescale_time,
    transport_residual,
)
from certbound.polynomial import Polynomial, SpaceMismatchError, VariableSpace, monomial_basis, parse_expression

TX = VariableSpace(["t", "x1", "x2"])


def P(text, space=TX):
    return parse_expression(text, space)


def field(*comps, states=("x1", "x2")):
    space = VariableSpace(["t", *states])
    return VectorField(space, tuple(parse_expression(c, space) for c in comps))


VDP = field("x2", "(1-9*x1^2)*x2 - x1")
ROT = field("x2", "-x1")
LORENZ = field("10*(x2-x1)", "x1*(28-x3)-x2", "x1*x2-2.6666666666666665*x3", states=("x1", "x2", "x3"))


def random_cubic(rng, space=TX):
    basis = monomial_basis(space, 3)
    return Polynomial(space, {m: float(c) for m, c in zip(basis, rng.uniform(-1, 1, len(basis)))})


def test_field_validates_component_count():
    with pytest.raises(Exception):
        VectorField(TX, (P("x2"),))


def test_lie_derivative_examples():
    assert lie_derivative(P("x1^2 + x2^2"), ROT).is_zero()
    assert lie_derivative(P("x2"), VDP) == P("(1-9*x1^2)*x2 - x1")
    assert lie_derivative(P("t"), VDP) == Polynomial.constant(TX, 1.0)


def test_lie_derivative_degree_bound():
    v = random_cubic(np.random.default_rng(1))
    assert lie_derivative(v, VDP).degree <= v.degree + VDP.degree - 1


def test_lie_derivative_space_mismatch():
    with pytest.raises(SpaceMismatchError):
        lie_derivative(parse_expression("x1", VariableSpace(["x1", "x2"])), VDP)


def test_rescale_examples():
    assert rescale_time(VDP, 1.0).components == VDP.components
    assert rescale_time(ROT, 2.0).components == (P("2*x2"), P("-2*x1"))
    f = field("t", states=("x",))
    g = rescale_time(f, 3.0)
    assert g.components[0] == parse_expression("9*t", f.space)
    # both reach 4.5 when integrated over their own domains
    assert math.isclose(integrate(f, [0.0], 3.0, 0.01).final_state[0], 4.5, abs_tol=1e-12)
    assert math.isclose(integrate(g, [0.0], 1.0, 0.01).final_state[0], 4.5, abs_tol=1e-12)
    with pytest.raises(ValueError):
        rescale_time(VDP, 0.0)


def test_rescale_invariance_of_final_state():
    x0 = [0.1, 0.2]
    a = integrate(VDP, x0, 2.0, 1e-3).final_state
    b = integrate(rescale_time(VDP, 2.0), x0, 1.0, 1e-3 / 2.0).final_state
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_integrate_exponential():
    f = field("x", states=("x",))
    traj = integrate(f, [1.0], 1.0, 1e-3)
    assert abs(traj.final_state[0] - math.e) <= 1e-9
    assert traj.times[0] == 0 and traj.times[-1] == 1.0
    assert np.all(np.diff(traj.times) > 0)


def test_integrate_zero_field_and_partial_step():
    f = field("0", "0")
    traj = integrate(f, [0.3, -0.7], 0.25, 0.1)
    np.testing.assert_array_equal(traj.states, np.tile([0.3, -0.7], (len(traj.times), 1)))
    np.testing.assert_allclose(traj.times, [0, 0.1, 0.2, 0.25])


def test_integrate_lorenz_against_reference():
    x0 = [2.254, 4.029, 10.646]
    ours = integrate(LORENZ, x0, 0.2, 1e-4).final_state
    assert np.all(np.isfinite(ours))
    assert -25 <= ours[0] <= 25 and -30 <= ours[1] <= 30 and 0 <= ours[2] <= 50
    ref = solve_ivp(lambda t, x: LORENZ(t, x), (0, 0.2), x0, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    np.testing.assert_allclose(ours, ref, atol=1e-6)


def test_integrate_many_matches_single():
    x0 = np.array([[0.1, 0.2], [-0.3, 0.5], [0.0, 0.0]])
    many = integrate_many(VDP, x0, 1.0, 1e-2)
    for row, x in zip(many, x0):
        np.testing.assert_allclose(row, integrate(VDP, x, 1.0, 1e-2).final_state, rtol=0, atol=1e-14)


def test_blow_up_reports_time_and_index():
    f = field("x^2", states=("x",))
    with pytest.raises(BlowUpError) as info:
        integrate(f, [1.0], 5.0, 0.01)
    assert 0.9 < info.value.time < 5.0
    with pytest.raises(BlowUpError) as info:
        integrate_many(f, np.array([[0.1], [1.0]]), 5.0, 0.01)
    assert info.value.index == 1


def test_rk4_order():
    x0 = [0.5, -0.4]
    T = 2.0
    ref = integrate(VDP, x0, T, 0.05 / 100).final_state
    e1 = np.linalg.norm(integrate(VDP, x0, T, 0.05).final_state - ref)
    e2 = np.linalg.norm(integrate(VDP, x0, T, 0.025).final_state - ref)
    assert 12 <= e1 / e2 <= 20


def test_transport_residual_examples():
    x0 = [0.1, 0.2]
    assert transport_residual(Polynomial.constant(TX, 3.0), VDP, x0, 1.0, 1e-2) == 0.0
    assert transport_residual(P("t"), VDP, x0, 1.0, 1e-2) <= 1e-10
    v = random_cubic(np.random.default_rng(7))
    r4 = transport_residual(v, VDP, x0, 1.0, 1e-4)
    r5 = transport_residual(v, VDP, x0, 1.0, 1e-5)
    assert r4 <= 1e-6
    assert r5 < r4 / 50


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lie_derivative_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    v = random_cubic(rng)
    x0 = rng.uniform(-0.5, 0.5, 2)
    traj = integrate(VDP, x0, rng.uniform(0.01, 0.05), 1e-5)
    k = len(traj.times) // 2
    h = 1e-5
    vals = [v(traj.times[i], *traj.states[i]) for i in (k - 1, k + 1)]
    fd = (vals[1] - vals[0]) / (2 * h)
    lv = lie_derivative(v, VDP)(traj.times[k], *traj.states[k])
    assert abs(fd - lv) <= 1e-5
