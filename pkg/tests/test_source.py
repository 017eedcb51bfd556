import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polqkd.bloch import overlap, state_from_theta
from polqkd.source import (
    PAPER_MAX_DELTA,
    PAPER_THETA,
    SourceProfile,
    default_profile_from_paper,
    emit_block,
    emit_sequence,
    ideal_profile,
    mean_amplitude_angle,
    mean_state,
)


@pytest.fixture(scope="module")
def ref():
    return default_profile_from_paper()


class TestDefaultProfile:
    def test_default_values(self, ref):
        assert ref.theta_avg[0] == 8.0
        assert np.abs(ref.delta[2]).max() == 8.0
        assert ref.mu_cond[0, 1] / ref.mu[0] == pytest.approx(1.03)
        assert ref.p_c == 0.0019
        assert ref.p_z_alice == pytest.approx(0.9)
        assert ref.p_intensity[0] == 0.6

    def test_max_deviation_per_state(self, ref):
        assert np.allclose(np.abs(ref.delta).max(axis=1), PAPER_MAX_DELTA)
        assert np.allclose(ref.theta_avg, PAPER_THETA)

    def test_mean_state_is_average_angle(self, ref):
        for j in range(3):
            assert mean_state(ref, j).theta == pytest.approx(ref.theta_avg[j], abs=1e-9)

    def test_serialisation_round_trip(self, ref):
        back = SourceProfile.from_dict(ref.to_dict())
        for name in ("theta_avg", "delta", "mu", "mu_cond", "p_state", "p_intensity"):
            assert np.array_equal(getattr(back, name), getattr(ref, name))
        assert back.p_c == ref.p_c


class TestValidation:
    def base(self, **kw):
        d = dict(
            theta_avg=np.array([0.0, 180.0, 90.0]),
            delta=np.zeros((3, 3)),
            mu=np.array([0.3, 0.15]),
            mu_cond=np.array([[0.3, 0.3], [0.15, 0.15]]),
            p_c=0.0,
            p_state=np.array([0.45, 0.45, 0.1]),
            p_intensity=np.array([0.6, 0.4]),
        )
        d.update(kw)
        return SourceProfile(**d)

    def test_valid(self):
        self.base()

    @pytest.mark.parametrize(
        "kw",
        [
            {"mu": np.array([0.1, 0.2])},
            {"p_state": np.array([0.5, 0.5, 0.1])},
            {"p_intensity": np.array([1.2, -0.2])},
            {"p_c": 1.5},
            {"delta": np.full((3, 3), 95.0)},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            self.base(**kw)

    def test_with_params_keeps_relative_swing(self, ref):
        q = ref.with_params(mu0=0.4, mu1=0.1, p_signal=0.5, p_z=0.8)
        assert np.allclose(q.mu_cond / q.mu[:, None], ref.mu_cond / ref.mu[:, None])
        assert q.p_z_alice == pytest.approx(0.8)
        assert q.p_state[0] == pytest.approx(q.p_state[1])


class TestMeanState:
    def test_uncorrelated(self):
        prof = ideal_profile()
        for j in range(3):
            assert mean_state(prof, j).theta == pytest.approx(prof.theta_avg[j] % 360, abs=1e-9)

    def test_equal_weights_circular_mean(self):
        thetas = [8.0 + 6.3, 8.0 - 6.3, 8.0]
        # oracle: normalised vector sum of the amplitude vectors
        v = sum(np.array([math.cos(math.radians(t) / 2), math.sin(math.radians(t) / 2)]) for t in thetas)
        expected = 2 * math.degrees(math.atan2(v[1], v[0]))
        got = mean_amplitude_angle(thetas)
        assert got == pytest.approx(expected, abs=1e-12)
        assert abs(got - 8.0) < 0.05

    def test_single_predecessor(self, ref):
        for k in range(3):
            w = np.eye(3)[k]
            got = mean_state(ref, 1, weights=w).theta
            assert got == pytest.approx(ref.theta_avg[1] + ref.delta[1, k], abs=1e-9)

    def test_deviations_bounded_by_max(self, ref):
        for j, k in itertools.product(range(3), range(3)):
            cond = state_from_theta(ref.theta_cond[j, k])
            bound = math.cos(math.radians(PAPER_MAX_DELTA[j]) / 2) ** 2
            assert overlap(mean_state(ref, j), cond) >= bound - 1e-12


class TestEmission:
    def test_uncorrelated_angles(self):
        prof = default_profile_from_paper().uncorrelated()
        recs = list(emit_sequence(prof, 2000, seed=3))
        assert {r.theta_actual for r in recs} <= set(prof.theta_avg.tolist())

    def test_first_pulse(self, ref):
        r = next(emit_sequence(ref, 5, seed=1))
        assert r.coherent_with_prev is False
        assert r.theta_actual == ref.theta_avg[["0", "1", "+"].index(r.state_label)]

    def test_deterministic(self, ref):
        a = list(emit_sequence(ref, 500, seed=42))
        b = list(emit_sequence(ref, 500, seed=42))
        assert a == b

    def test_chunking_does_not_change_stream(self, ref):
        a = list(emit_sequence(ref, 1000, seed=5, chunk=1000))
        b = list(emit_sequence(ref, 1000, seed=5, chunk=1000))
        assert a == b

    def test_z_fraction(self, ref):
        blk = emit_block(ref, 1_000_000, np.random.default_rng(7))
        frac = np.mean(blk.state < 2)
        assert abs(frac - 0.9) < 0.001

    def test_pair_frequencies(self, ref):
        n = 1_000_000
        blk = emit_block(ref, n, np.random.default_rng(11))
        for j, k in itertools.product(range(3), range(3)):
            p = ref.p_state[j] * ref.p_state[k]
            obs = np.sum((blk.state[1:] == j) & (blk.prev_state[1:] == k))
            sigma = math.sqrt((n - 1) * p * (1 - p))
            assert abs(obs - (n - 1) * p) < 3.5 * sigma

    def test_conditional_angles_exact(self, ref):
        blk = emit_block(ref, 10_000, np.random.default_rng(2))
        want = ref.theta_avg[blk.state[1:]] + ref.delta[blk.state[1:], blk.prev_state[1:]]
        assert np.array_equal(blk.theta[1:], want)
        want_mu = ref.mu_cond[blk.intensity[1:], blk.prev_intensity[1:]]
        assert np.array_equal(blk.mu[1:], want_mu)

    @pytest.mark.parametrize("pc,expected", [(0.0, False), (1.0, True)])
    def test_phase_flag_limits(self, ref, pc, expected):
        prof = SourceProfile(**{**ref.__dict__, "p_c": pc})
        blk = emit_block(prof, 1000, np.random.default_rng(0))
        assert not blk.coherent[0]
        assert np.all(blk.coherent[1:] == expected)

    def test_rejects_empty(self, ref):
        with pytest.raises(ValueError):
            next(emit_sequence(ref, 0, seed=1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=1, max_size=6))
def test_mean_angle_within_spread(offsets):
    thetas = [30.0 + o for o in offsets]
    m = mean_amplitude_angle(thetas)
    assert min(thetas) - 1e-9 <= m <= max(thetas) + 1e-9
