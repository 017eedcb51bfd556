"""Source characterization: rotating-QWP polarimetry with correlation-angle
extraction, decoy-intensity correlation statistics, and the interferometric
phase-coherence estimate."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bloch import PureState, StokesVector, stokes_to_state
from .source import INTENSITIES, STATES, SourceProfile, mean_amplitude_angle

MIN_ANGLES = 8
DEFAULT_QWP_ANGLES = tuple(np.arange(16) * 180.0 / 16)
SEQUENCE_SLOTS = 32


# ---------------------------------------------------------------------------
# polarimetry


@dataclass
class QwpTrace:
    """Mean detected intensity per (pulse slot, QWP angle)."""

    angles: np.ndarray
    intensities: np.ndarray
    states: np.ndarray
    intensity_labels: np.ndarray = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.intensities = np.atleast_2d(np.asarray(self.intensities, dtype=float))
        self.states = np.asarray(self.states, dtype=int)
        if self.intensity_labels is None:
            self.intensity_labels = np.zeros(len(self.states), dtype=int)
        self.intensity_labels = np.asarray(self.intensity_labels, dtype=int)
        if self.intensities.shape != (len(self.states), len(self.angles)):
            raise ValueError("intensities must have shape (slots, angles)")
        if np.any(self.intensities < 0):
            raise ValueError("intensities must be non-negative")
        if len(np.unique(np.round(self.angles % 180.0, 9))) < MIN_ANGLES:
            raise ValueError(f"need at least {MIN_ANGLES} distinct QWP angles")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(QWP_HEADER)
        for s in range(len(self.states)):
            for i, a in enumerate(self.angles):
                w.writerow([s, STATES[self.states[s]], INTENSITIES[self.intensity_labels[s]],
                            repr(float(a)), repr(float(self.intensities[s, i]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "QwpTrace":
        rows = _read_rows(text, QWP_HEADER)
        slots: dict[int, dict] = {}
        angles: list[float] = []
        for lineno, row in rows:
            try:
                s = int(row["slot"])
                state = _label(row["state"], STATES, "state")
                inten = _label(row["intensity"], INTENSITIES, "intensity")
                a = float(row["qwp_angle_deg"])
                v = float(row["counts"])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if s < 0:
                raise ValueError(f"line {lineno}: slot must be >= 0")
            rec = slots.setdefault(s, {"state": state, "intensity": inten, "values": {}})
            if rec["state"] != state or rec["intensity"] != inten:
                raise ValueError(f"line {lineno}: slot {s} relabelled")
            rec["values"][a] = v
            if a not in angles:
                angles.append(a)
        order = sorted(slots)
        if order != list(range(len(order))):
            raise ValueError("slots must be numbered 0..N-1 without gaps")
        try:
            mat = [[slots[s]["values"][a] for a in angles] for s in order]
        except KeyError as exc:
            raise ValueError(f"angle {exc.args[0]} missing for some slot") from None
        return cls(
            angles=np.array(angles),
            intensities=np.array(mat),
            states=np.array([slots[s]["state"] for s in order]),
            intensity_labels=np.array([slots[s]["intensity"] for s in order]),
        )


QWP_HEADER = ["slot", "state", "intensity", "qwp_angle_deg", "counts"]


def _design(angles) -> np.ndarray:
    r = np.radians(2.0 * np.asarray(angles, dtype=float))
    c, s = np.cos(r), np.sin(r)
    return 0.5 * np.column_stack([np.ones_like(r), c**2, c * s, -s])


def qwp_forward(s: StokesVector, rho):
    """Intensity behind a QWP at ``rho`` degrees followed by a polarizer at 0.

    I = 1/2 [s0 + s1 cos^2 2rho + s2 cos 2rho sin 2rho - s3 sin 2rho].
    """
    out = _design(np.atleast_1d(rho)) @ s.as_array()
    return float(out[0]) if np.ndim(rho) == 0 else out


def fit_stokes(trace: QwpTrace, slot: int) -> StokesVector:
    """Least-squares inversion of the QWP forward model for one slot."""
    a = _design(trace.angles)
    if np.linalg.matrix_rank(a) < 4:
        raise ValueError("QWP angle set does not determine all four Stokes parameters")
    y = trace.intensities[slot]
    if not np.any(y > 0):
        raise ValueError(f"slot {slot} has no signal")
    s, *_ = np.linalg.lstsq(a, y, rcond=None)
    if s[0] <= 0:
        raise ValueError(f"slot {slot}: fitted intensity is not positive")
    pol = float(np.linalg.norm(s[1:]))
    if pol > s[0]:
        # noise can push the fit marginally outside the Poincare sphere
        s[1:] *= s[0] / pol
    return StokesVector(*s)


def synthetic_trace(
    thetas,
    states,
    intensity_labels=None,
    scale=None,
    angles=DEFAULT_QWP_ANGLES,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> QwpTrace:
    """Noiseless (or multiplicatively noisy) trace of great-circle states."""
    thetas = np.radians(np.asarray(thetas, dtype=float))
    scale = np.ones(len(thetas)) if scale is None else np.asarray(scale, dtype=float)
    stokes = np.column_stack([scale, scale * np.sin(thetas), np.zeros_like(thetas), scale * np.cos(thetas)])
    vals = stokes @ _design(angles).T
    if noise:
        rng = rng or np.random.default_rng(0)
        vals = vals * (1.0 + noise * rng.standard_normal(vals.shape))
        vals = np.clip(vals, 0.0, None)
    return QwpTrace(np.asarray(angles, dtype=float), vals, states, intensity_labels)


# ---------------------------------------------------------------------------
# correlation angles


@dataclass
class CorrelationReport:
    theta: np.ndarray  # (3,) degrees, frame fixed so theta_+ = 90
    delta: np.ndarray  # (3, 3) [j, k] degrees
    theta_cond: np.ndarray  # (3, 3) [j, k] degrees
    s2_residual: float
    frame_rotation: float

    @property
    def max_delta(self) -> np.ndarray:
        return np.abs(self.delta).max(axis=1)

    def to_dict(self) -> dict:
        return {
            "theta_deg": {s: float(v) for s, v in zip(STATES, self.theta)},
            "max_abs_delta_deg": {s: float(v) for s, v in zip(STATES, self.max_delta)},
            "delta_deg": {
                j: {k: float(self.delta[a, b]) for b, k in enumerate(STATES)}
                for a, j in enumerate(STATES)
            },
            "s2_residual": self.s2_residual,
            "frame_rotation_deg": self.frame_rotation,
        }


def _unwrap(angles, ref: float) -> np.ndarray:
    """Map angles into (ref - 180, ref + 180] so amplitude averaging never
    meets the sign flip of the half-angle representation."""
    a = np.asarray(angles, dtype=float)
    return ref + (a - ref + 180.0) % 360.0 - 180.0


def _bloch_mean_angle(angles) -> float:
    r = np.radians(angles)
    return math.degrees(math.atan2(np.sin(r).sum(), np.cos(r).sum()))


def extract_correlations(states: list[PureState], labels, p_state=None) -> CorrelationReport:
    """Average angles and correlation angles from per-slot states.

    The slot sequence is treated as cyclic (slot 0 follows the last slot).
    theta_{j|k} averages slots labelled j whose predecessor is k; theta_j is
    the p_state-weighted average of theta_{j|k} over k, and the frame is
    rotated so theta_+ = 90 degrees.  S2 components are dropped from the
    angles and reported as a residual.
    """
    labels = np.asarray(labels, dtype=int)
    if len(states) != len(labels):
        raise ValueError("one label per state is required")
    w = np.array([0.45, 0.45, 0.1]) if p_state is None else np.asarray(p_state, dtype=float)
    angles = np.array([s.theta for s in states])
    s2 = max((abs(s.s2) for s in states), default=0.0)
    prev = np.roll(labels, 1)

    cond = np.full((3, 3), np.nan)
    for j in range(3):
        sel_j = labels == j
        if not sel_j.any():
            raise ValueError(f"state {STATES[j]} never occurs")
        ref = _bloch_mean_angle(angles[sel_j])
        for k in range(3):
            sel = sel_j & (prev == k)
            if not sel.any():
                raise ValueError(f"pair ({STATES[j]}|{STATES[k]}) missing from the sequence")
            cond[j, k] = mean_amplitude_angle(_unwrap(angles[sel], ref))
    theta = np.array([mean_amplitude_angle(cond[j], w) for j in range(3)])
    rotation = 90.0 - theta[2]
    theta = theta + rotation
    cond = cond + rotation
    # report in [0, 360) while keeping conditionals next to their average
    shift = theta - theta % 360.0
    theta = theta - shift
    cond = cond - shift[:, None]
    return CorrelationReport(theta, cond - theta[:, None], cond, float(s2), float(rotation))


def characterize_trace(trace: QwpTrace, p_state=None) -> CorrelationReport:
    states = []
    for slot in range(len(trace.states)):
        st, _ = stokes_to_state(fit_stokes(trace, slot))
        states.append(st)
    return extract_correlations(states, trace.states, p_state)


def covering_sequence(rng: np.random.Generator, slots: int = SEQUENCE_SLOTS, kinds: int = 3) -> np.ndarray:
    """Random cyclic label sequence in which every ordered pair occurs."""
    if slots < kinds * kinds:
        raise ValueError("sequence too short to contain every pair")
    for _ in range(100_000):
        seq = rng.integers(kinds, size=slots)
        pairs = set(zip(seq.tolist(), np.roll(seq, 1).tolist()))
        if len(pairs) == kinds * kinds:
            return seq
    raise RuntimeError("failed to draw a covering sequence")


def profile_trace(
    profile: SourceProfile,
    seed: int = 0,
    slots: int = SEQUENCE_SLOTS,
    angles=DEFAULT_QWP_ANGLES,
    noise: float = 0.0,
) -> QwpTrace:
    """Synthetic polarimeter trace of a cyclic slot sequence from ``profile``."""
    rng = np.random.default_rng(seed)
    states = covering_sequence(rng, slots, 3)
    inten = covering_sequence(rng, slots, 2)
    prev_s, prev_i = np.roll(states, 1), np.roll(inten, 1)
    thetas = profile.theta_avg[states] + profile.delta[states, prev_s]
    scale = profile.mu_cond[inten, prev_i]
    return synthetic_trace(thetas, states, inten, scale, angles, noise, rng)


# ---------------------------------------------------------------------------
# decoy intensity correlations


@dataclass
class DecoyCorrelationReport:
    mu_mean: np.ndarray  # (2,)
    mu_cond: np.ndarray  # (2, 2) [current, previous]
    max_relative_deviation: float
    signal_decoy_ratio: float

    def to_dict(self) -> dict:
        return {
            "mean_intensity": {i: float(v) for i, v in zip(INTENSITIES, self.mu_mean)},
            "conditional_intensity": {
                a: {b: float(self.mu_cond[x, y]) for y, b in enumerate(INTENSITIES)}
                for x, a in enumerate(INTENSITIES)
            },
            "max_relative_deviation": self.max_relative_deviation,
            "signal_decoy_ratio": self.signal_decoy_ratio,
        }


def decoy_correlation_stats(values, labels) -> DecoyCorrelationReport:
    """Mean intensity of each setting conditioned on the previous setting.

    Samples form a cyclic sequence; the predecessor of the first sample is
    the last one.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if values.shape != labels.shape or values.ndim != 1:
        raise ValueError("values and labels must be 1-D arrays of equal length")
    prev = np.roll(labels, 1)
    mean = np.zeros(2)
    cond = np.zeros((2, 2))
    for a in range(2):
        sel = labels == a
        if not sel.any():
            raise ValueError(f"intensity {INTENSITIES[a]} never occurs")
        mean[a] = values[sel].mean()
        for b in range(2):
            pair = sel & (prev == b)
            if not pair.any():
                raise ValueError(f"pair ({INTENSITIES[a]}|{INTENSITIES[b]}) missing")
            cond[a, b] = values[pair].mean()
    dev = float(np.max(np.abs(cond / mean[:, None] - 1.0)))
    return DecoyCorrelationReport(mean, cond, dev, float(mean[0] / mean[1]))


def synthetic_intensity_samples(profile: SourceProfile, n: int, seed: int = 0, noise: float = 0.0):
    """Per-slot intensities of a random setting sequence drawn from ``profile``."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) >= profile.p_intensity[0]).astype(int)
    values = profile.mu_cond[labels, np.roll(labels, 1)]
    if noise:
        values = values * (1.0 + noise * rng.standard_normal(n))
    return values, labels


INTENSITY_HEADER = ["slot", "intensity", "value"]


def intensity_samples_to_csv(values, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INTENSITY_HEADER)
    for i, (v, a) in enumerate(zip(values, labels)):
        w.writerow([i, INTENSITIES[a], repr(float(v))])
    return buf.getvalue()


def intensity_samples_from_csv(text: str):
    values, labels = [], []
    for lineno, row in _read_rows(text, INTENSITY_HEADER):
        try:
            labels.append(_label(row["intensity"], INTENSITIES, "intensity"))
            v = float(row["value"])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if v < 0:
            raise ValueError(f"line {lineno}: intensity must be non-negative")
        values.append(v)
    return np.array(values), np.array(labels)


# ---------------------------------------------------------------------------
# phase randomization


@dataclass
class VisibilityCurve:
    delays: np.ndarray  # arm-length difference, mm
    v_cw: np.ndarray
    v_pulsed: np.ndarray

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=float)
        self.v_cw = np.asarray(self.v_cw, dtype=float)
        self.v_pulsed = np.asarray(self.v_pulsed, dtype=float)
        if not (self.delays.shape == self.v_cw.shape == self.v_pulsed.shape):
            raise ValueError("delays, v_cw and v_pulsed must have equal length")
        if len(self.delays) == 0:
            raise ValueError("visibility curve is empty")
        for name in ("v_cw", "v_pulsed"):
            v = getattr(self, name)
            if np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VISIBILITY_HEADER)
        for row in zip(self.delays, self.v_cw, self.v_pulsed):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "VisibilityCurve":
        cols = {k: [] for k in VISIBILITY_HEADER}
        for lineno, row in _read_rows(text, VISIBILITY_HEADER):
            for k in VISIBILITY_HEADER:
                try:
                    cols[k].append(float(row[k]))
                except ValueError:
                    raise ValueError(f"line {lineno}: {k} is not a number: {row[k]!r}") from None
        return cls(*(cols[k] for k in VISIBILITY_HEADER))


VISIBILITY_HEADER = ["delay_mm", "v_cw", "v_pulsed"]


def estimate_pc(curve: VisibilityCurve) -> float:
    """p_c* = max over delays of V_pulsed / V_CW, clamped to [0, 1]."""
    ok = curve.v_cw > 0
    if not ok.any():
        raise ValueError("continuous-wave visibility is zero at every delay")
    return float(np.clip(np.max(curve.v_pulsed[ok] / curve.v_cw[ok]), 0.0, 1.0))


def fringe_visibility(phase, intensity) -> float:
    """(I_max - I_min)/(I_max + I_min) of a least-squares sinusoid fit.

    ``phase`` is the interferometer phase in radians at each sample.
    """
    phase = np.asarray(phase, dtype=float)
    intensity = np.asarray(intensity, dtype=float)
    if phase.shape != intensity.shape or phase.size < 3:
        raise ValueError("need at least three (phase, intensity) samples")
    a = np.column_stack([np.ones_like(phase), np.cos(phase), np.sin(phase)])
    if np.linalg.matrix_rank(a) < 3:
        raise ValueError("phase samples do not resolve a fringe")
    (offset, c, s), *_ = np.linalg.lstsq(a, intensity, rcond=None)
    if offset <= 0:
        raise ValueError("fringe has no positive mean intensity")
    return float(min(1.0, math.hypot(c, s) / offset))


# ---------------------------------------------------------------------------
# CSV helpers


def _label(value: str, names, what: str) -> int:
    try:
        return names.index(value.strip())
    except ValueError:
        raise ValueError(f"unknown {what} {value!r}; expected one of {list(names)}") from None


def _read_rows(text: str, header: list[str]):
    lines = [ln for ln in text.splitlines()]
    content = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not content:
        raise ValueError("file is empty")
    head_no, head = content[0]
    cols = [c.strip() for c in next(csv.reader([head]))]
    missing = [c for c in header if c not in cols]
    if missing:
        raise ValueError(f"line {head_no}: header lacks columns {missing}")
    rows = []
    for lineno, ln in content[1:]:
        vals = next(csv.reader([ln]))
        if len(vals) != len(cols):
            raise ValueError(f"line {lineno}: expected {len(cols)} fields, got {len(vals)}")
        rows.append((lineno, dict(zip(cols, vals))))
    if not rows:
        raise ValueError("file has a header but no data rows")
    return rows
