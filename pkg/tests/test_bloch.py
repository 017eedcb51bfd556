import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polqkd.bloch import (
    PureState,
    StokesVector,
    binary_entropy,
    overlap,
    rotate_in_plane,
    state_from_theta,
    stokes_to_state,
)

angles = st.floats(-720.0, 720.0, allow_nan=False)
probs = st.floats(0.0, 1.0)


class TestStateFromTheta:
    def test_poles_and_equator(self):
        assert np.allclose(state_from_theta(0.0).vector, [0, 0, 1])
        assert np.allclose(state_from_theta(90.0).vector, [1, 0, 0])

    def test_measured_angle(self):
        # 8 degrees: explicit trigonometry
        s = state_from_theta(8.0)
        assert s.s1 == pytest.approx(0.13917, abs=1e-5)
        assert s.s2 == 0.0
        assert s.s3 == pytest.approx(0.99027, abs=1e-5)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            state_from_theta(float("nan"))

    @given(angles)
    def test_round_trip(self, theta):
        back = state_from_theta(theta).theta
        diff = (back - theta) % 360.0
        assert min(diff, 360.0 - diff) < 1e-9

    @given(angles)
    def test_great_circle(self, theta):
        s = state_from_theta(theta)
        assert s.s2 == 0.0
        assert s.is_pure


class TestPureState:
    def test_norm_bounds(self):
        with pytest.raises(ValueError):
            PureState(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            PureState(1.0, 0.1, 0.0)
        assert not PureState(0.5, 0.0, 0.0).is_pure

    def test_amplitudes(self):
        a = state_from_theta(120.0).amplitudes
        assert np.allclose(a, [math.cos(math.radians(60)), math.sin(math.radians(60))])


class TestOverlap:
    def test_identical_and_orthogonal(self):
        assert overlap(state_from_theta(0), state_from_theta(0)) == pytest.approx(1.0)
        assert overlap(state_from_theta(0), state_from_theta(180)) == pytest.approx(0.0, abs=1e-15)

    def test_measured_key_states(self):
        # oracle: explicit inner product of the real amplitude vectors
        a = np.array([math.cos(math.radians(4.0)), math.sin(math.radians(4.0))])
        b = np.array([math.cos(math.radians(82.8)), math.sin(math.radians(82.8))])
        expected = float(a @ b) ** 2
        got = overlap(state_from_theta(8.0), state_from_theta(165.6))
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.03772, abs=1e-5)

    def test_rejects_mixed(self):
        with pytest.raises(ValueError):
            overlap(PureState(0.5, 0, 0), state_from_theta(0))

    @given(angles, angles)
    def test_symmetric_and_bounded(self, x, y):
        a, b = state_from_theta(x), state_from_theta(y)
        assert overlap(a, b) == pytest.approx(overlap(b, a))
        assert 0.0 <= overlap(a, b) <= 1.0
        assert overlap(a, a) == pytest.approx(1.0)
        assert overlap(a, b) == pytest.approx(math.cos(math.radians(x - y) / 2) ** 2, abs=1e-12)


class TestBinaryEntropy:
    def test_values(self):
        assert binary_entropy(0.5) == 1.0
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.035) == pytest.approx(0.21887, abs=1e-5)

    @pytest.mark.parametrize("p", [-0.1, 1.1])
    def test_out_of_range(self, p):
        with pytest.raises(ValueError):
            binary_entropy(p)

    @given(probs)
    def test_symmetric(self, p):
        assert binary_entropy(p) == pytest.approx(binary_entropy(1.0 - p), abs=1e-12)


class TestStokes:
    def test_anchor_states(self):
        s, depol = stokes_to_state(StokesVector(1, 0, 0, 1))
        assert np.allclose(s.vector, [0, 0, 1]) and depol == 0.0
        s, depol = stokes_to_state(StokesVector(2, 2, 0, 0))
        assert np.allclose(s.vector, [1, 0, 0]) and depol == pytest.approx(0.0)

    def test_partial_polarization(self):
        s, depol = stokes_to_state(StokesVector(1, 0.5, 0, 0.5))
        assert np.allclose(s.vector, [0.70711, 0, 0.70711], atol=1e-5)
        assert depol == pytest.approx(0.29289, abs=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            stokes_to_state(StokesVector(0, 0, 0, 0))
        with pytest.raises(ValueError):
            StokesVector(1, 1, 1, 0)
        with pytest.raises(ValueError):
            StokesVector(-1, 0, 0, 0)

    def test_dop(self):
        assert StokesVector(2, 1, 0, 0).dop == pytest.approx(0.5)
        assert StokesVector(0, 0, 0, 0).dop == 0.0


@given(angles, st.floats(-180, 180))
def test_rotation_shifts_theta(theta, angle):
    r = rotate_in_plane(state_from_theta(theta), angle)
    diff = (r.theta - theta - angle) % 360.0
    assert min(diff, 360.0 - diff) < 1e-7
