import math

import numpy as np
import pytest

from certbound.dynamics import BlowUpError, VectorField
from certbound.montecarlo import (
    EnsembleStats,
    InitialDistribution,
    Variant,
    consistency_check,
    estimate_expectation,
    sample_initial,
)
from certbound.polynomial import Polynomial, PolynomialError, VariableSpace, parse_expression

MU = np.array([0.1, 0.2])
SIGMA = np.diag([0.03 ** 2, 0.05 ** 2])
STATES = VariableSpace(["x1", "x2"])


def vf(*comps, states=("x1", "x2")):
    space = VariableSpace(["t", *states])
    return VectorField(space, tuple(parse_expression(c, space) for c in comps))


def test_distribution_validation():
    with pytest.raises(ValueError):
        InitialDistribution.normal([0, 0], [[1, 0.5], [0, 1]])
    with pytest.raises(ValueError):
        InitialDistribution.normal([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError):
        InitialDistribution.uniform_box([0, 0], [[1, 0.1], [0.1, 1]])
    with pytest.raises(ValueError):
        InitialDistribution.normal([0, 0, 0], np.eye(2))


def test_uniform_box_half_widths():
    d = InitialDistribution.uniform_box(MU, SIGMA)
    np.testing.assert_allclose(d.half_widths, math.sqrt(3) * np.array([0.03, 0.05]))
    s = sample_initial(d, 5000, 1)
    assert np.all(np.abs(s - MU) <= d.half_widths + 1e-15)


def test_uniform_unit_variance():
    d = InitialDistribution.uniform_box([0.0], [[1.0]])
    s = sample_initial(d, 200_000, 3)
    assert abs(s.var(ddof=1) - 1.0) < 0.02


def test_degenerate_normal():
    d = InitialDistribution.normal(MU, np.zeros((2, 2)))
    np.testing.assert_array_equal(sample_initial(d, 10, 0), np.tile(MU, (10, 1)))


def test_normal_mean_within_clt_bound():
    d = InitialDistribution.normal(MU, SIGMA)
    s = sample_initial(d, 100_000, 11)
    se = np.sqrt(np.diag(SIGMA) / s.shape[0])
    assert np.all(np.abs(s.mean(axis=0) - MU) <= 4 * se)


@pytest.mark.parametrize("variant", list(Variant))
def test_moment_matching(variant):
    d = InitialDistribution(variant, MU, SIGMA)
    s = sample_initial(d, 100_000, 5)
    np.testing.assert_allclose(s.mean(axis=0), MU, atol=2.5e-2)
    np.testing.assert_allclose(np.cov(s.T), SIGMA, atol=2.5e-2)
    # much tighter than the advertised two decimals in practice
    np.testing.assert_allclose(np.cov(s.T), SIGMA, atol=5e-5)


def test_seed_determinism():
    d = InitialDistribution.normal(MU, SIGMA)
    a = sample_initial(d, 1000, 42)
    b = sample_initial(d, 1000, 42)
    c = sample_initial(d, 1000, 43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_bad_count():
    with pytest.raises(ValueError):
        sample_initial(InitialDistribution.normal(MU, SIGMA), 0, 1)


def test_constant_observable():
    f = vf("x2", "-x1")
    st = estimate_expectation(f, Polynomial.constant(STATES, 5.0), InitialDistribution.normal(MU, SIGMA), 1.0,
                              500, 1e-2, 0)
    assert st.mean == 5.0 and st.variance == 0.0 and st.standard_error == 0.0


def test_identity_dynamics_mean():
    f = vf("0", "0")
    g = parse_expression("x1", STATES)
    st = estimate_expectation(f, g, InitialDistribution.normal(MU, SIGMA), 1.0, 4000, 0.5, 9)
    assert abs(st.mean - MU[0]) <= 4 * st.standard_error


def test_vdp_mean_in_table_interval():
    f = vf("x2", "(1-9*x1^2)*x2 - x1")
    g = parse_expression("x1", STATES)
    st = estimate_expectation(f, g, InitialDistribution.normal(MU, SIGMA), 1.0, 10_000, 1e-3, 2024)
    assert consistency_check(st, (0.2857, 0.2917)).consistent


def test_observable_space_must_match():
    f = vf("0", "0")
    with pytest.raises(PolynomialError):
        estimate_expectation(f, parse_expression("y", VariableSpace(["y"])), InitialDistribution.normal(MU, SIGMA),
                             1.0, 10, 0.1, 0)


def test_blow_up_names_sample():
    f = vf("x^2", states=("x",))
    d = InitialDistribution.normal([0.0], [[4.0]])
    with pytest.raises(BlowUpError) as info:
        estimate_expectation(f, parse_expression("x", VariableSpace(["x"])), d, 10.0, 50, 0.01, 0)
    assert info.value.index is not None


def test_stats_from_values():
    st = EnsembleStats.from_values(np.array([1.0, 2.0, 3.0, 4.0]))
    assert st.mean == 2.5
    assert st.variance == pytest.approx(5 / 3)
    assert st.standard_error == pytest.approx(math.sqrt(5 / 12))


def test_consistency_examples():
    st = EnsembleStats(10_000, 0.29, 1e-2)  # stderr 1e-3
    assert consistency_check(st, (0.2857, 0.2917)).consistent
    bad = consistency_check(EnsembleStats(10_000, 0.40, 1e-2), (0.2857, 0.2917))
    assert not bad.consistent
    assert bad.slack == pytest.approx(0.40 - 0.2917 - 3e-3)
    edge = consistency_check(EnsembleStats(1, 0.2917, 0.0), (0.2857, 0.2917))
    assert edge.consistent and edge.slack == 0.0
