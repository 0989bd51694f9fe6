import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tofgs.tof import (SPEED_OF_LIGHT, ToFConfig, phasor_of_depth, quad_basis, quad_to_amplitude,
                       quad_to_depth, quad_to_phasor, synthesize_quad, unambiguous_range)

CFG = ToFConfig.for_range(5.0)


def test_unambiguous_range_values():
    # c / 2f by hand: 299792458 / (2 * 29979245.8) = 5
    assert unambiguous_range(ToFConfig(29.9792458e6)) == pytest.approx(5.0, abs=1e-12)
    assert unambiguous_range(ToFConfig(59.9584916e6)) == pytest.approx(2.5, abs=1e-12)
    f0 = 10e6
    assert unambiguous_range(ToFConfig(2 * f0)) == pytest.approx(0.5 * unambiguous_range(ToFConfig(f0)))


def test_config_validation():
    with pytest.raises(ValueError):
        ToFConfig(0.0)
    with pytest.raises(ValueError):
        ToFConfig(1e6, source_intensity=-1.0)
    assert ToFConfig().speed_of_light == SPEED_OF_LIGHT


def test_zero_phase_quad():
    B, A = 2.0, 0.7
    assert quad_to_depth([B, B + A, B, B - A], CFG) == 0.0


def test_depth_round_trip_examples():
    assert quad_to_depth(quad_basis(2.0, CFG), CFG) == pytest.approx(2.0, abs=1e-12)
    assert quad_to_depth(quad_basis(6.0, CFG), CFG) == pytest.approx(1.0, abs=1e-12)


def test_zero_amplitude_is_sentinel():
    d = quad_to_depth(np.full((2, 2, 4), 3.0), CFG)
    assert np.all(np.isnan(d))


def test_amplitude_examples():
    assert quad_to_amplitude([1.0, 1.0, 1.0, 1.0]) == 0.0
    for psi in np.linspace(0, 2 * np.pi, 7):
        q = 1.0 * np.sin(psi + np.array([0, 0.5, 1, 1.5]) * np.pi) + 3.0
        assert quad_to_amplitude(q) == pytest.approx(1.0, abs=1e-12)
    q = np.array([0.3, -1.2, 0.8, 2.0])
    assert quad_to_amplitude(2.5 * q) == pytest.approx(2.5 * quad_to_amplitude(q))


def test_phasor_of_depth_examples():
    np.testing.assert_allclose(phasor_of_depth(0.0, CFG), (1.0, 0.0), atol=1e-15)
    np.testing.assert_allclose(phasor_of_depth(2.5, CFG), (-1.0, 0.0), atol=1e-15)
    np.testing.assert_allclose(phasor_of_depth(1.25, CFG), (0.0, 1.0), atol=1e-15)


def test_quad_basis_examples():
    np.testing.assert_allclose(quad_basis(2.5, CFG), [0, -1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(quad_basis(0.0, CFG), [0, 1, 0, -1], atol=1e-15)


def test_quad_to_phasor_examples():
    np.testing.assert_allclose(quad_to_phasor([2.0, 2.0, 2.0, 2.0]), (0.0, 0.0))
    d = 1.7
    re, im = quad_to_phasor(quad_basis(d, CFG))
    assert np.hypot(re, im) == pytest.approx(2.0)
    assert np.mod(np.arctan2(im, re), 2 * np.pi) == pytest.approx(CFG.phase_per_meter * d)


def test_phasor_is_twice_unit_phasor():
    for d in np.linspace(0, 4.9, 11):
        np.testing.assert_allclose(quad_to_phasor(quad_basis(d, CFG)), 2 * np.asarray(phasor_of_depth(d, CFG)),
                                   atol=1e-14)


def test_wrap_snaps_to_zero():
    # phase a hair below 2 pi is a round-off zero
    assert quad_to_depth([-1e-17, 1.0, 1e-17, -1.0], CFG) == 0.0


quads = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).map(np.array)


@settings(max_examples=200, deadline=None)
@given(d=st.floats(1e-6, 5.0 - 1e-6), A=st.floats(1e-3, 1e3), B=st.floats(-1e3, 1e3))
def test_round_trip_property(d, A, B):
    got = quad_to_depth(synthesize_quad(d, A, CFG, B), CFG)
    assert abs(got - d) <= 1e-9 * 5.0 or abs(abs(got - d) - 5.0) <= 1e-9 * 5.0


@settings(max_examples=100, deadline=None)
@given(d=st.floats(0.01, 4.99), k=st.integers(0, 5))
def test_wrap_property(d, k):
    a = quad_to_depth(quad_basis(d + k * 5.0, CFG), CFG)
    b = quad_to_depth(quad_basis(d, CFG), CFG)
    assert a == pytest.approx(b, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(q=quads, c=st.floats(-100, 100))
def test_bias_invariance(q, c):
    a = quad_to_amplitude(q)
    assert quad_to_amplitude(q + c) == pytest.approx(a, abs=1e-9 * (1 + abs(c)))
    if a > 1e-3:
        d0, d1 = quad_to_depth(q, CFG), quad_to_depth(q + c, CFG)
        diff = abs(d0 - d1)
        assert min(diff, 5.0 - diff) < 1e-6


@settings(max_examples=100, deadline=None)
@given(q1=quads, q2=quads, w=st.floats(-3, 3))
def test_phasor_linearity(q1, q2, w):
    lhs = np.array(quad_to_phasor(q1 + w * q2))
    rhs = np.array(quad_to_phasor(q1)) + w * np.array(quad_to_phasor(q2))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
