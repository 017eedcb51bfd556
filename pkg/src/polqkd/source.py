"""Alice's transmitter: prepared angles, nearest-neighbour correlations,
conditional decoy intensities and the phase-coherence flag."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .bloch import PureState, state_from_theta

STATES = ("0", "1", "+")
INTENSITIES = ("signal", "decoy")
# bit value carried by each prepared state (|+> encodes 0 in the X basis)
STATE_BIT = (0, 1, 0)
STATE_BASIS = ("Z", "Z", "X")

PAPER_THETA = (8.0, 165.6, 90.0)
PAPER_MAX_DELTA = (6.3, 6.9, 8.0)
PAPER_MU = (0.3, 0.15)
PAPER_P_SIGNAL = 0.6
PAPER_P_Z_ALICE = 0.9
PAPER_PC_STAR = 0.0019
PAPER_INTENSITY_SWING = 0.03

PROB_TOL = 1e-9


@dataclass
class SourceProfile:
    """Conditional state and intensity tables of the transmitter.

    Arrays are indexed by position in ``STATES`` / ``INTENSITIES``:
    ``delta[j, k]`` is the angle offset of state j after state k and
    ``mu_cond[a, b]`` the mean photon number of intensity a after b.
    """

    theta_avg: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    mu_cond: np.ndarray
    p_c: float
    p_state: np.ndarray
    p_intensity: np.ndarray

    def __post_init__(self):
        self.theta_avg = np.asarray(self.theta_avg, dtype=float).reshape(3)
        self.delta = np.asarray(self.delta, dtype=float).reshape(3, 3)
        self.mu = np.asarray(self.mu, dtype=float).reshape(2)
        self.mu_cond = np.asarray(self.mu_cond, dtype=float).reshape(2, 2)
        self.p_state = np.asarray(self.p_state, dtype=float).reshape(3)
        self.p_intensity = np.asarray(self.p_intensity, dtype=float).reshape(2)
        self.validate()

    def validate(self) -> None:
        for name in ("p_state", "p_intensity"):
            p = getattr(self, name)
            if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > PROB_TOL:
                raise ValueError(f"{name} must be probabilities summing to 1, got {p}")
        if not (0.0 <= self.p_c <= 1.0):
            raise ValueError(f"p_c must lie in [0, 1], got {self.p_c}")
        if not (self.mu[0] > self.mu[1] > 0):
            raise ValueError(f"need mu(signal) > mu(decoy) > 0, got {self.mu}")
        if np.any(self.mu_cond <= 0):
            raise ValueError("conditional intensities must be positive")
        if np.any(np.abs(self.delta) > 90.0):
            raise ValueError("correlation angles must satisfy |delta| <= 90 deg")
        if not np.all(np.isfinite(self.theta_avg)):
            raise ValueError("theta_avg must be finite")

    @property
    def theta_cond(self) -> np.ndarray:
        """theta_{j|k} = theta_j + delta_{j|k}, degrees."""
        return self.theta_avg[:, None] + self.delta

    @property
    def p_z_alice(self) -> float:
        return float(self.p_state[0] + self.p_state[1])

    def with_params(self, mu0=None, mu1=None, p_signal=None, p_z=None) -> "SourceProfile":
        """Copy with new protocol parameters; relative intensity correlations kept."""
        rel = self.mu_cond / self.mu[:, None]
        mu = self.mu.copy()
        if mu0 is not None:
            mu[0] = mu0
        if mu1 is not None:
            mu[1] = mu1
        p_int = self.p_intensity.copy()
        if p_signal is not None:
            p_int = np.array([p_signal, 1.0 - p_signal])
        p_state = self.p_state.copy()
        if p_z is not None:
            z_split = self.p_state[:2] / self.p_state[:2].sum()
            p_state = np.array([p_z * z_split[0], p_z * z_split[1], 1.0 - p_z])
        return SourceProfile(
            theta_avg=self.theta_avg.copy(),
            delta=self.delta.copy(),
            mu=mu,
            mu_cond=rel * mu[:, None],
            p_c=self.p_c,
            p_state=p_state,
            p_intensity=p_int,
        )

    def uncorrelated(self) -> "SourceProfile":
        """Same averages with all nearest-neighbour effects switched off."""
        return SourceProfile(
            theta_avg=self.theta_avg.copy(),
            delta=np.zeros((3, 3)),
            mu=self.mu.copy(),
            mu_cond=np.repeat(self.mu[:, None], 2, axis=1),
            p_c=0.0,
            p_state=self.p_state.copy(),
            p_intensity=self.p_intensity.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "theta": {s: float(t) for s, t in zip(STATES, self.theta_avg)},
            "delta": {
                j: {k: float(self.delta[a, b]) for b, k in enumerate(STATES)}
                for a, j in enumerate(STATES)
            },
            "mu": {i: float(m) for i, m in zip(INTENSITIES, self.mu)},
            "mu_cond": {
                a: {b: float(self.mu_cond[x, y]) for y, b in enumerate(INTENSITIES)}
                for x, a in enumerate(INTENSITIES)
            },
            "p_c": float(self.p_c),
            "p_state": {s: float(p) for s, p in zip(STATES, self.p_state)},
            "p_intensity": {i: float(p) for i, p in zip(INTENSITIES, self.p_intensity)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceProfile":
        def vec(table, keys, what):
            try:
                return [float(table[k]) for k in keys]
            except KeyError as exc:
                raise ValueError(f"{what}: missing entry {exc}") from None

        mu = vec(d["mu"], INTENSITIES, "mu")
        delta = d.get("delta")
        if delta is None:
            delta_arr = np.zeros((3, 3))
        else:
            delta_arr = [vec(delta[j], STATES, f"delta.{j}") for j in STATES]
        mu_cond = d.get("mu_cond")
        if mu_cond is None:
            mu_cond_arr = np.repeat(np.array(mu)[:, None], 2, axis=1)
        else:
            mu_cond_arr = [vec(mu_cond[a], INTENSITIES, f"mu_cond.{a}") for a in INTENSITIES]
        return cls(
            theta_avg=vec(d["theta"], STATES, "theta"),
            delta=delta_arr,
            mu=mu,
            mu_cond=mu_cond_arr,
            p_c=float(d.get("p_c", 0.0)),
            p_state=vec(d["p_state"], STATES, "p_state"),
            p_intensity=vec(d["p_intensity"], INTENSITIES, "p_intensity"),
        )


def default_profile_from_paper() -> SourceProfile:
    """Measured 5 GHz transmitter: reference angles, 3 % decoy swing, p_c = 0.0019.

    Only max_k |delta_{j|k}| is known; it is assigned with sign +1 after
    |0>, -1 after |1> and 0 after |+>.
    """
    signs = np.array([1.0, -1.0, 0.0])
    delta = np.outer(PAPER_MAX_DELTA, signs)
    mu = np.array(PAPER_MU)
    # row a = current intensity, column b = previous intensity
    swing = np.array([[-1.0, 1.0], [-1.0, 1.0]]) * PAPER_INTENSITY_SWING
    mu_cond = mu[:, None] * (1.0 + swing)
    pz = PAPER_P_Z_ALICE
    return SourceProfile(
        theta_avg=np.array(PAPER_THETA),
        delta=delta,
        mu=mu,
        mu_cond=mu_cond,
        p_c=PAPER_PC_STAR,
        p_state=np.array([pz / 2, pz / 2, 1 - pz]),
        p_intensity=np.array([PAPER_P_SIGNAL, 1 - PAPER_P_SIGNAL]),
    )


def ideal_profile(mu=PAPER_MU, p_signal=PAPER_P_SIGNAL, p_z=PAPER_P_Z_ALICE) -> SourceProfile:
    mu = np.asarray(mu, dtype=float)
    return SourceProfile(
        theta_avg=np.array([0.0, 180.0, 90.0]),
        delta=np.zeros((3, 3)),
        mu=mu,
        mu_cond=np.repeat(mu[:, None], 2, axis=1),
        p_c=0.0,
        p_state=np.array([p_z / 2, p_z / 2, 1 - p_z]),
        p_intensity=np.array([p_signal, 1 - p_signal]),
    )


@dataclass(frozen=True)
class PulseRecord:
    index: int
    state_label: str
    intensity_label: str
    theta_actual: float
    mu_actual: float
    coherent_with_prev: bool


@dataclass
class PulseBlock:
    """Vectorised pulse sequence; ``prev_*`` are -1 for the very first pulse."""

    state: np.ndarray
    intensity: np.ndarray
    prev_state: np.ndarray
    prev_intensity: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    coherent: np.ndarray
    offset: int = 0

    def __len__(self):
        return len(self.state)


def emit_block(
    profile: SourceProfile,
    n: int,
    rng: np.random.Generator,
    prev: tuple[int, int] | None = None,
    offset: int = 0,
) -> PulseBlock:
    """Draw ``n`` pulses; ``prev`` carries the (state, intensity) of the pulse
    preceding this block when continuing a stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    state = _draw(rng, profile.p_state, n)
    intensity = _draw(rng, profile.p_intensity, n)
    coherent = rng.random(n) < profile.p_c

    prev_state = np.empty(n, dtype=np.int8)
    prev_intensity = np.empty(n, dtype=np.int8)
    prev_state[1:] = state[:-1]
    prev_intensity[1:] = intensity[:-1]
    if prev is None:
        prev_state[0] = -1
        prev_intensity[0] = -1
        coherent[0] = False
    else:
        prev_state[0], prev_intensity[0] = prev

    has_prev = prev_state >= 0
    ps = np.where(has_prev, prev_state, 0)
    pi = np.where(has_prev, prev_intensity, 0)
    theta = profile.theta_avg[state] + np.where(has_prev, profile.delta[state, ps], 0.0)
    mu = np.where(has_prev, profile.mu_cond[intensity, pi], profile.mu[intensity])
    return PulseBlock(state, intensity, prev_state, prev_intensity, theta, mu, coherent, offset)


def _draw(rng: np.random.Generator, p: np.ndarray, n: int) -> np.ndarray:
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int8)


def emit_sequence(
    profile: SourceProfile, n: int, seed: int, chunk: int = 1 << 20
) -> Iterator[PulseRecord]:
    """Stream of PulseRecord; identical for identical (profile, n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    done = 0
    prev = None
    while done < n:
        m = min(chunk, n - done)
        blk = emit_block(profile, m, rng, prev=prev, offset=done)
        for i in range(m):
            yield PulseRecord(
                index=done + i,
                state_label=STATES[blk.state[i]],
                intensity_label=INTENSITIES[blk.intensity[i]],
                theta_actual=float(blk.theta[i]),
                mu_actual=float(blk.mu[i]),
                coherent_with_prev=bool(blk.coherent[i]),
            )
        prev = (int(blk.state[-1]), int(blk.intensity[-1]))
        done += m


def mean_amplitude_angle(thetas, weights=None) -> float:
    """Angle (degrees) of the normalised weighted sum of real amplitude vectors
    (cos t/2, sin t/2)."""
    t = np.radians(np.asarray(thetas, dtype=float)) / 2.0
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    x = np.sum(w * np.cos(t))
    y = np.sum(w * np.sin(t))
    if math.hypot(x, y) == 0.0:
        raise ValueError("conditional states cancel; average state undefined")
    return math.degrees(2.0 * math.atan2(y, x))


def mean_state(profile: SourceProfile, j: int | str, weights=None) -> PureState:
    """Average of |psi_{j|k}> over predecessors k, weighted by p_state[k]."""
    if isinstance(j, str):
        j = STATES.index(j)
    w = profile.p_state if weights is None else weights
    return state_from_theta(mean_amplitude_angle(profile.theta_cond[j], w))
