"""Bob's receiver: fibre loss, passive basis split and four threshold
detectors with dark counts, dead time and double-click squashing."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .bloch import PureState

DETECTORS = ("Z0", "Z1", "X+", "X-")
NO_CLICK = None

# all 16 firing patterns of the four detectors, row i = bits of i
PATTERNS = np.array(list(itertools.product((0, 1), repeat=4)), dtype=bool)[:, ::-1]
_PATTERN_SIZE = PATTERNS.sum(axis=1)
# squashed outcome weights: pattern -> share credited to each detector
SQUASH = np.where(
    _PATTERN_SIZE[:, None] > 0, PATTERNS / np.maximum(_PATTERN_SIZE, 1)[:, None], 0.0
)


@dataclass(frozen=True)
class LinkModel:
    fiber_length: float = 0.0  # km
    attenuation_coeff: float = 0.2  # dB/km
    bob_insertion_loss: float = 1.0  # dB
    detector_efficiency: float = 0.8
    dark_rate: float = 191.0  # Hz per detector
    dead_time: float = 0.0  # s
    repetition_rate: float = 5e9  # Hz
    p_basis_bob_Z: float = 0.5
    misalignment_angle: float = 0.0  # degrees, rotation about S2

    def __post_init__(self):
        if not self.attenuation_coeff > 0:
            raise ValueError("attenuation_coeff must be > 0")
        if self.fiber_length < 0 or self.bob_insertion_loss < 0:
            raise ValueError("fiber_length and bob_insertion_loss must be >= 0")
        if not (0 < self.detector_efficiency <= 1):
            raise ValueError("detector_efficiency must lie in (0, 1]")
        if self.dead_time < 0 or self.dark_rate < 0:
            raise ValueError("dead_time and dark_rate must be >= 0")
        if not self.repetition_rate > 0:
            raise ValueError("repetition_rate must be > 0")
        if not (0 < self.p_basis_bob_Z < 1):
            raise ValueError("p_basis_bob_Z must lie in (0, 1)")

    @property
    def p_dark(self) -> float:
        """Dark-click probability per detector per gate."""
        return min(1.0, self.dark_rate / self.repetition_rate)

    @property
    def dead_slots(self) -> int:
        return math.ceil(self.dead_time * self.repetition_rate - 1e-9) if self.dead_time > 0 else 0

    @property
    def route(self) -> np.ndarray:
        pz = self.p_basis_bob_Z
        return np.array([pz, pz, 1 - pz, 1 - pz])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinkModel":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown link fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def transmittance(model: LinkModel) -> float:
    loss_db = model.fiber_length * model.attenuation_coeff + model.bob_insertion_loss
    return 10.0 ** (-loss_db / 10.0) * model.detector_efficiency


def projection_probabilities(s1, s3, misalignment: float = 0.0) -> np.ndarray:
    """Born probabilities for Z0, Z1, X+, X- given in-plane Bloch components.

    Works elementwise on arrays; returns shape (..., 4).
    """
    s1 = np.asarray(s1, dtype=float)
    s3 = np.asarray(s3, dtype=float)
    if misalignment:
        a = math.radians(misalignment)
        c, s = math.cos(a), math.sin(a)
        s1, s3 = c * s1 + s * s3, c * s3 - s * s1
    return 0.5 * np.stack([1 + s3, 1 - s3, 1 + s1, 1 - s1], axis=-1)


def click_probabilities_theta(theta, mu, model: LinkModel, t: float | None = None) -> np.ndarray:
    """Vectorised per-detector click probability for great-circle angles."""
    theta = np.radians(np.asarray(theta, dtype=float))
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mean photon number must be >= 0")
    t = transmittance(model) if t is None else t
    proj = projection_probabilities(np.sin(theta), np.cos(theta), model.misalignment_angle)
    mean = (mu * t)[..., None] * model.route * proj
    return -np.expm1(-mean) * (1 - model.p_dark) + model.p_dark


def click_probabilities(state: PureState, mu: float, model: LinkModel) -> np.ndarray:
    """Click probability of (Z0, Z1, X+, X-) for one pulse.

    p_d = 1 - (1 - p_dark) exp(-mu t route_d proj_d).
    """
    if mu < 0:
        raise ValueError("mean photon number must be >= 0")
    proj = projection_probabilities(state.s1, state.s3, model.misalignment_angle)
    mean = mu * transmittance(model) * model.route * proj
    return 1.0 - (1.0 - model.p_dark) * np.exp(-mean)


def pattern_probabilities(p) -> np.ndarray:
    """Probability of each of the 16 firing patterns for independent detectors."""
    p = np.asarray(p, dtype=float)[..., None, :]
    return np.prod(np.where(PATTERNS, p, 1.0 - p), axis=-1)


def outcome_probabilities(p) -> np.ndarray:
    """Expected squashed outcome distribution (Z0, Z1, X+, X-, none)."""
    pat = pattern_probabilities(p)
    det = pat @ SQUASH
    return np.concatenate([det, pat[..., :1]], axis=-1)


def resolve_click(pattern, rng: np.random.Generator):
    """Map a firing pattern to one detector label, squashing multi-clicks
    uniformly at random; returns None when nothing fired."""
    fired = [d for d, f in zip(DETECTORS, pattern) if f]
    if not fired:
        return NO_CLICK
    if len(fired) == 1:
        return fired[0]
    return fired[int(rng.integers(len(fired)))]
