import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vortexlab.kernel import (CirculationLaw, InvalidParameter, KernelSpec, biot_savart, divergence_of_v,
                              rescale_to_unit, sample_circulations, v_matrix)

coord = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-6)
delta = st.floats(0, 10)


def test_unit_point_value():
    np.testing.assert_allclose(biot_savart((1.0, 0.0)), (0.0, 1 / (2 * math.pi)), rtol=0, atol=1e-16)


def test_origin_is_zero_for_any_delta():
    for d in (0.0, 0.1, 1.0):
        assert np.all(biot_savart((0.0, 0.0), KernelSpec(d)) == 0.0)


def test_negative_delta_rejected():
    with pytest.raises(InvalidParameter):
        KernelSpec(-1.0)


@given(coord, coord, delta)
def test_odd(x1, x2, d):
    s = KernelSpec(d)
    np.testing.assert_array_equal(biot_savart((-x1, -x2), s), -biot_savart((x1, x2), s))


@given(coord, coord, delta)
def test_orthogonal(x1, x2, d):
    k = biot_savart((x1, x2), KernelSpec(d))
    assert abs(x1 * k[0] + x2 * k[1]) <= 1e-12 * math.hypot(x1, x2) * np.hypot(*k) + 1e-300


@given(coord, coord)
def test_exact_magnitude(x1, x2):
    r = math.hypot(x1, x2)
    assert np.hypot(*biot_savart((x1, x2))) == pytest.approx(1 / (2 * math.pi * r), rel=1e-12)


@given(coord, coord, st.floats(1e-3, 10))
def test_blob_magnitude_bound(x1, x2, d):
    assert np.hypot(*biot_savart((x1, x2), KernelSpec(d))) <= 1 / (4 * math.pi * d) * (1 + 1e-12)


def test_v_matrix_values():
    assert v_matrix((1.0, 1.0)) == pytest.approx(-0.125, abs=1e-15)
    assert v_matrix((2.0, 0.0)) == -0.25
    assert v_matrix((-2.0, 0.0)) == 0.25


def test_v_bounded_on_many_points():
    x = np.random.default_rng(0).normal(scale=10, size=(10**6, 2))
    assert np.max(np.abs(v_matrix(x))) <= 0.25


def test_divergence_matches_kernel_at_example_point():
    x = np.array([0.5, 1.2])
    np.testing.assert_allclose(divergence_of_v(x), biot_savart(x), atol=1e-6)


def test_divergence_converges_second_order():
    x = np.array([0.7, -0.9])
    e1 = np.abs(divergence_of_v(x, 1e-2) - biot_savart(x)).max()
    e2 = np.abs(divergence_of_v(x, 5e-3) - biot_savart(x)).max()
    assert 3.5 < e1 / e2 < 4.5


def test_sample_constant():
    np.testing.assert_array_equal(sample_circulations(CirculationLaw.constant(1.0), 5, 0), np.ones(5))


def test_sample_uniform_clt():
    n = 10**5
    m = sample_circulations(CirculationLaw.uniform(1.0), n, 1)
    assert abs(m.mean()) <= 3 * (1 / math.sqrt(3)) / math.sqrt(n)
    assert np.all(np.abs(m) <= 1)


def test_sample_two_point_support_and_determinism():
    law = CirculationLaw.two_point(0.5, 0.5)
    m = sample_circulations(law, 10**4, 7)
    assert set(np.unique(m)) <= {-0.5, 0.5}
    np.testing.assert_array_equal(m, sample_circulations(law, 10**4, 7))


def test_sample_needs_positive_n():
    with pytest.raises(InvalidParameter):
        sample_circulations(CirculationLaw.uniform(), 0, 0)


@pytest.mark.parametrize("law", [CirculationLaw.constant(0.3), CirculationLaw.uniform(0.7),
                                 CirculationLaw.two_point(0.4, 0.2)])
def test_law_round_trip(law):
    assert CirculationLaw.from_dict(law.to_dict()) == law


def test_law_moments():
    law = CirculationLaw.two_point(1.0, 0.75)
    assert law.mean() == pytest.approx(0.5)
    assert law.variance() == pytest.approx(0.75)
    assert CirculationLaw.uniform(2.0).variance() == pytest.approx(4 / 3)


def test_rescale_identity_and_example():
    x = np.array([[2.0, 0.0]])
    y, s, _ = rescale_to_unit(1.0, x, 0.3)
    np.testing.assert_array_equal(y, x)
    assert s == 0.3
    y, s, law = rescale_to_unit(4.0, x, 1.0, CirculationLaw.uniform(4.0))
    np.testing.assert_allclose(y, [[1.0, 0.0]])
    assert s == 0.25 and law.A == pytest.approx(1.0)


def test_rescale_rejects_nonpositive():
    with pytest.raises(InvalidParameter):
        rescale_to_unit(0.0, np.zeros((1, 2)), 1.0)


def test_rescaled_dynamics_agree():
    """Unscaled and rescaled systems with coupled noise give the same paths."""
    from vortexlab.particles import ParticleEnsemble, SimConfig, em_step
    rng = np.random.default_rng(3)
    A, sigma, n, dt = 4.0, 0.5, 6, 1e-3
    x = rng.normal(size=(n, 2))
    m = rng.uniform(-A, A, n)
    y, s2, _ = rescale_to_unit(A, x, sigma)
    e1 = ParticleEnsemble(x, m, sigma)
    e2 = ParticleEnsemble(y, m / A, s2)
    cfg = SimConfig(dt=dt, t_final=1.0)
    for _ in range(100):
        xi = rng.standard_normal((n, 2))
        e1 = em_step(e1, cfg, dt, noise=xi)
        # time is unchanged; drift and noise scale by 1/sqrt(A)
        e2 = em_step(e2, cfg, dt, noise=xi)
        np.testing.assert_allclose(e2.positions * math.sqrt(A), e1.positions, rtol=0, atol=1e-12)
