"""Two-level state geometry on the Poincare sphere.

Convention: |0> sits at +S3, |1> at -S3, |+> at +S1 and circular light on
S2.  Great-circle states carry a single angle theta (degrees) measured from
+S3 towards +S1, so the Bloch vector is (sin theta, 0, cos theta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PURE_TOL = 1e-9


@dataclass(frozen=True)
class PureState:
    """Bloch vector of a (nominally) pure polarization state."""

    s1: float
    s2: float
    s3: float

    def __post_init__(self):
        norm = self.norm
        if not (0.0 < norm <= 1.0 + PURE_TOL):
            raise ValueError(f"Bloch vector norm must lie in (0, 1], got {norm}")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3])

    @property
    def norm(self) -> float:
        return math.sqrt(self.s1**2 + self.s2**2 + self.s3**2)

    @property
    def is_pure(self) -> bool:
        return abs(self.norm - 1.0) <= PURE_TOL

    @property
    def theta(self) -> float:
        """Polar angle in the S1-S3 plane, degrees in [0, 360)."""
        return math.degrees(math.atan2(self.s1, self.s3)) % 360.0

    @property
    def amplitudes(self) -> np.ndarray:
        """Real amplitudes (cos theta/2, sin theta/2) of the in-plane projection."""
        half = math.radians(self.theta) / 2.0
        return np.array([math.cos(half), math.sin(half)])


@dataclass(frozen=True)
class StokesVector:
    s0: float
    s1: float
    s2: float
    s3: float

    def __post_init__(self):
        if self.s0 < 0:
            raise ValueError("s0 must be non-negative")
        pol = math.sqrt(self.s1**2 + self.s2**2 + self.s3**2)
        if pol > self.s0 * (1.0 + 1e-6) + 1e-12:
            raise ValueError(
                f"degree of polarization exceeds 1: |s|={pol}, s0={self.s0}"
            )

    @property
    def dop(self) -> float:
        """Degree of polarization."""
        if self.s0 == 0:
            return 0.0
        return math.sqrt(self.s1**2 + self.s2**2 + self.s3**2) / self.s0

    def as_array(self) -> np.ndarray:
        return np.array([self.s0, self.s1, self.s2, self.s3])


def state_from_theta(theta: float) -> PureState:
    """Great-circle state cos(theta/2)|0> + sin(theta/2)|1>, theta in degrees."""
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    t = math.radians(theta % 360.0)
    return PureState(math.sin(t), 0.0, math.cos(t))


def overlap(a: PureState, b: PureState) -> float:
    """Fidelity |<a|b>|^2 = (1 + a.b)/2 for pure states."""
    if not (a.is_pure and b.is_pure):
        raise ValueError("overlap requires unit Bloch vectors")
    dot = a.s1 * b.s1 + a.s2 * b.s2 + a.s3 * b.s3
    return min(1.0, max(0.0, 0.5 * (1.0 + dot)))


def binary_entropy(p: float) -> float:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def stokes_to_state(s: StokesVector) -> tuple[PureState, float]:
    """Project a measured Stokes vector onto the nearest pure state.

    Returns the pure state and the depolarization fraction 1 - DOP.
    """
    if s.s0 <= 0:
        raise ValueError("zero intensity: Stokes vector carries no state")
    vec = np.array([s.s1, s.s2, s.s3]) / s.s0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("fully depolarized light has no nearest pure state")
    vec = vec / norm
    return PureState(*vec), max(0.0, 1.0 - norm)


def rotate_in_plane(state: PureState, angle: float) -> PureState:
    """Rotate about the S2 axis by ``angle`` degrees (theta -> theta + angle)."""
    a = math.radians(angle)
    c, s = math.cos(a), math.sin(a)
    return PureState(c * state.s1 + s * state.s3, state.s2, c * state.s3 - s * state.s1)
