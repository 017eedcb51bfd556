"""Finite-key distillation for the three-state 1-decoy protocol.

Pipeline: Hoeffding-corrected counts -> 1-decoy bounds on vacuum and
single-photon Z events -> loss-tolerant phase-error estimate from the X-basis
statistics of all three prepared states -> LDPC leakage -> key length.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bloch import binary_entropy
from .channel import LinkModel
from .protocol import TallySet, run_analytic
from .source import STATE_BASIS, SourceProfile

# number of terms the security parameter is split over in the key-length
# constant 6 log2(19/eps_sec); every Hoeffding bound gets eps_sec / 19
EPS_SPLIT = 19
# a rate-2/3 code reveals one syndrome bit per three key bits
LDPC_LEAK_DIVISOR = 3
LDPC_MAX_QBER = 0.03
FALLBACK_EC_EFFICIENCY = 1.16
IDEAL_THETA = (0.0, 180.0, 90.0)
# corners of the Hoeffding box around the twelve X-basis counts
_VERTEX_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=12))).reshape(-1, 3, 2, 2)


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_corr: float = 1e-15

    def __post_init__(self):
        for name in ("eps_sec", "eps_corr"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    @property
    def eps_pe(self) -> float:
        """Failure probability allotted to each parameter-estimation bound."""
        return self.eps_sec / EPS_SPLIT


def hoeffding_delta(n: float, eps: float) -> float:
    if not (0.0 < eps < 1.0):
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if n < 0:
        raise ValueError("count must be non-negative")
    return math.sqrt(0.5 * n * math.log(1.0 / eps))


def hoeffding_bounds(n: float, eps: float) -> tuple[float, float]:
    """(n - delta, n + delta) with delta = sqrt(n/2 ln(1/eps)); lower clamped at 0."""
    d = hoeffding_delta(n, eps)
    return max(0.0, n - d), n + d


def tau(k: int, mu, p) -> float:
    """Probability that a pulse holds k photons, averaged over intensities."""
    mu = np.asarray(mu, dtype=float)
    p = np.asarray(p, dtype=float)
    return float(np.sum(p * np.exp(-mu) * mu**k) / math.factorial(k))


# ---------------------------------------------------------------------------
# 1-decoy bounds


@dataclass
class DecoyBounds:
    s_0Z: float
    s_1Z: float
    s_0Z_upper: float
    v_1X: float
    s_1X: float
    n_Z: float
    m_Z: float
    insufficient: bool
    detail: dict = field(default_factory=dict)


def _normalised(counts, delta, mu, p, sign):
    """e^mu_k / p_k (count_k + sign*delta), per intensity."""
    return np.exp(mu) / p * (np.asarray(counts, dtype=float) + sign * delta)


def single_photon_lower(counts, s0_upper_over_tau0, mu, p, eps) -> float:
    """1-decoy lower bound on single-photon events in a set of detections."""
    mu0, mu1 = mu
    t1 = tau(1, mu, p)
    d = hoeffding_delta(float(np.sum(counts)), eps)
    lo = _normalised(counts, d, mu, p, -1.0)
    hi = _normalised(counts, d, mu, p, +1.0)
    val = t1 * mu0 / (mu1 * (mu0 - mu1)) * (
        lo[1] - (mu1**2 / mu0**2) * hi[0] - ((mu0**2 - mu1**2) / mu0**2) * s0_upper_over_tau0
    )
    return max(0.0, val)


def single_photon_upper(counts, mu, p, eps) -> float:
    """1-decoy upper bound on single-photon events in a set of detections."""
    mu0, mu1 = mu
    d = hoeffding_delta(float(np.sum(counts)), eps)
    lo = _normalised(counts, d, mu, p, -1.0)
    hi = _normalised(counts, d, mu, p, +1.0)
    return max(0.0, tau(1, mu, p) / (mu0 - mu1) * (hi[0] - lo[1]))


def decoy_bounds(t: TallySet, profile: SourceProfile, sec: SecurityParams) -> DecoyBounds:
    """Vacuum and single-photon bounds for the sifted Z-Z key, plus the
    single-photon error bound of the |+> state measured in X."""
    mu, p = profile.mu, profile.p_intensity
    mu0, mu1 = mu
    eps = sec.eps_pe
    t0 = tau(0, mu, p)

    z = [j for j in range(3) if STATE_BASIS[j] == "Z"]
    n_zk = t.n[z, 0, :].sum(axis=0)
    m_zk = t.m[z, 0, :].sum(axis=0)
    n_z, m_z = float(n_zk.sum()), float(m_zk.sum())

    dn = hoeffding_delta(n_z, eps)
    dm = hoeffding_delta(m_z, eps)
    n_lo = _normalised(n_zk, dn, mu, p, -1.0)
    n_hi = _normalised(n_zk, dn, mu, p, +1.0)
    m_hi = _normalised(m_zk, dm, mu, p, +1.0)

    s0_lower = max(0.0, t0 / (mu0 - mu1) * (mu0 * n_lo[1] - mu1 * n_hi[0]))
    # vacuum detections carry no bit information: half of them are errors
    s0_upper = 2.0 * t0 * m_hi[1]
    s1_lower = single_photon_lower(n_zk, s0_upper / t0, mu, p, eps) if n_z > 0 else 0.0
    s0_lower = min(s0_lower, n_z)
    s1_lower = min(s1_lower, n_z - s0_lower)

    plus = 2
    n_xk = t.n[plus, 1, :]
    m_xk = t.m[plus, 1, :]
    s0x_over_tau0 = vacuum_share(t, profile, plus, s0_upper / t0)
    s1x = single_photon_lower(n_xk, s0x_over_tau0, mu, p, eps) if n_xk.sum() > 0 else 0.0
    v1x = single_photon_upper(m_xk, mu, p, eps) if m_xk.sum() > 0 else 0.0

    return DecoyBounds(
        s_0Z=s0_lower,
        s_1Z=s1_lower,
        s_0Z_upper=min(s0_upper, n_z),
        v_1X=v1x,
        s_1X=s1x,
        n_Z=n_z,
        m_Z=m_z,
        insufficient=bool(s1_lower <= 0.0),
        detail={
            "tau0": t0,
            "tau1": tau(1, mu, p),
            "n_Z_per_intensity": n_zk.tolist(),
            "m_Z_per_intensity": m_zk.tolist(),
            "hoeffding_delta_n_Z": dn,
            "hoeffding_delta_m_Z": dm,
            "eps_per_bound": eps,
        },
    )


def _pulses_per_state(t: TallySet, profile: SourceProfile) -> np.ndarray:
    sent = t.n_sent.sum(axis=1)
    if sent.sum() > 0:
        return sent
    return profile.p_state * t.elapsed_pulses


def vacuum_share(t: TallySet, profile: SourceProfile, j: int, s0z_upper_over_tau0: float) -> float:
    """Upper bound on vacuum detections / tau0 in Bob's X basis for state j.

    Vacuum pulses are state independent and Bob's basis split is passive, so
    the X-basis vacuum yield is the Z-basis one scaled by the routing ratio.
    """
    per_state = _pulses_per_state(t, profile)
    z = [i for i in range(3) if STATE_BASIS[i] == "Z"]
    n_zstates = per_state[z].sum()
    if n_zstates <= 0:
        return 0.0
    pz = profile_route_z(t)
    return s0z_upper_over_tau0 * per_state[j] / n_zstates * (1 - pz) / pz


def profile_route_z(t: TallySet) -> float:
    """Bob's Z-routing probability as seen in the data (0.5 when no clicks)."""
    n = t.n.sum(axis=(0, 2))
    return float(n[0] / n.sum()) if n.sum() > 0 else 0.5


# ---------------------------------------------------------------------------
# loss-tolerant phase error


@dataclass
class PhaseErrorEstimate:
    phi: float
    phi_point: float
    gamma: float
    yields: list
    virtual_weights: list
    affine: list
    theta: list


def _amplitudes(theta):
    h = math.radians(theta) / 2.0
    return np.array([math.cos(h), math.sin(h)])


def virtual_states(theta0: float, theta1: float):
    """Alice's virtual X-basis states for the Z-key states.

    Returns (Bloch (x, z) of |v+>, |v->) and their probabilities
    (1 +/- <psi0|psi1>)/2.
    """
    a0, a1 = _amplitudes(theta0), _amplitudes(theta1)
    ov = float(a0 @ a1)
    out = []
    for sgn in (1.0, -1.0):
        u = a0 + sgn * a1
        u = u / np.linalg.norm(u)
        out.append((2 * u[0] * u[1], u[0] ** 2 - u[1] ** 2))
    return np.array(out), np.array([(1 + ov) / 2, (1 - ov) / 2])


def affine_coordinates(theta_states, targets) -> np.ndarray:
    """Weights a with sum_j a_j r_j = r_target and sum_j a_j = 1.

    Any yield linear in the qubit state is then Y(target) = sum_j a_j Y(j).
    """
    r = np.array([[math.sin(math.radians(t)), math.cos(math.radians(t)), 1.0] for t in theta_states]).T
    if abs(np.linalg.det(r)) < 1e-9:
        raise ValueError("states do not span the Z-X plane")
    rhs = np.column_stack([np.asarray(targets, dtype=float), np.ones(len(targets))]).T
    return np.linalg.solve(r, rhs).T


def _cell_yield_coefficients(profile: SourceProfile):
    """Linear map from the two per-intensity counts of a cell to its
    single-photon yield estimate (per pulse of that state, per tau1)."""
    mu0, mu1 = profile.mu
    p0, p1 = profile.p_intensity
    k = 1.0 / (mu1 * (mu0 - mu1))
    # mu0/(mu1(mu0-mu1)) [e^mu1/p1 c1 - mu1^2/mu0^2 e^mu0/p0 c0]
    return np.array([-k * mu1**2 / mu0 * math.exp(mu0) / p0, k * mu0 * math.exp(mu1) / p1])


def phase_error_loss_tolerant(
    t: TallySet,
    profile: SourceProfile,
    sec: SecurityParams | None,
    theta=None,
    s_1Z: float | None = None,
) -> PhaseErrorEstimate:
    """Upper estimate of the Z-key phase error from X-basis data.

    Each cell (state j, Bob outcome X+/X-) gets a single-photon yield from
    the two intensities; the qubit structure makes yields affine in the
    Bloch vector, so the three prepared states fix Bob's X-measurement
    completely and the virtual-state error rate follows.  Finite size:
    the worst case over the Hoeffding box of all twelve counts, plus the
    random-sampling term between test and key events.  ``theta`` overrides
    the prepared angles (pass ideal ones for the uncompensated estimate).
    """
    theta = list(profile.theta_avg if theta is None else theta)
    (v_bloch, p_v) = virtual_states(theta[0], theta[1])
    aff = affine_coordinates(theta, v_bloch)  # rows: v+, v-; cols: states
    per_state = _pulses_per_state(t, profile)
    if np.any(per_state <= 0):
        raise ValueError("X-basis tallies for all three states are required")

    # counts[j, s, k]: s = 0 for X+, 1 for X-
    counts = np.zeros((3, 2, 2))
    for j in range(3):
        nx, mx = t.n[j, 1, :], t.m[j, 1, :]
        minus = mx if j != 1 else nx - mx
        counts[j, 1] = minus
        counts[j, 0] = nx - minus
    coef = _cell_yield_coefficients(profile)

    def error_rate(c):
        # c: (..., 3, 2, 2) -> yields (..., 3, 2)
        y = (c * coef).sum(axis=-1) / per_state[:, None]
        yv = np.einsum("vj,...js->...vs", aff, y)  # (..., v, s)
        num = p_v[0] * yv[..., 0, 1] + p_v[1] * yv[..., 1, 0]
        den = p_v[0] * yv[..., 0, :].sum(axis=-1) + p_v[1] * yv[..., 1, :].sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, num / den, 0.5)

    point = float(error_rate(counts))
    if sec is None:
        phi, gamma = point, 0.0
    else:
        delta = np.array([[hoeffding_delta(counts[j, s].sum(), sec.eps_pe) for s in range(2)] for j in range(3)])
        box = np.clip(counts + _VERTEX_SIGNS * delta[:, :, None], 0.0, None)
        worst = float(np.max(error_rate(box)))
        sample = _single_photon_test_events(counts, coef, profile)
        gamma = sampling_term(sec.eps_sec, min(max(worst, 0.0), 0.5), s_1Z or 0.0, sample)
        phi = worst + gamma
    yields = ((counts * coef).sum(axis=-1) / per_state[:, None]).tolist()
    return PhaseErrorEstimate(
        phi=float(min(max(phi, 0.0), 0.5)),
        phi_point=float(min(max(point, 0.0), 0.5)),
        gamma=gamma,
        yields=yields,
        virtual_weights=p_v.tolist(),
        affine=aff.tolist(),
        theta=[float(x) for x in theta],
    )


def _single_photon_test_events(counts, coef, profile):
    t1 = tau(1, profile.mu, profile.p_intensity)
    z = [j for j in range(3) if STATE_BASIS[j] == "Z"]
    return max(0.0, float(t1 * (counts[z] * coef).sum()))


def sampling_term(eps: float, e: float, n_key: float, n_test: float) -> float:
    """Random-sampling correction between test and key single-photon events."""
    if n_key <= 0 or n_test <= 0 or e <= 0 or e >= 1:
        return 0.0
    c, d = n_key, n_test
    arg = (c + d) / (c * d * (1 - e) * e) * 21.0**2 / eps**2
    return math.sqrt((c + d) * (1 - e) * e / (c * d * math.log(2)) * math.log2(arg))


def phase_error_uncompensated(t, profile, sec, s_1Z=None) -> PhaseErrorEstimate:
    """Same estimator assuming ideal angles 0, 180, 90 degrees."""
    return phase_error_loss_tolerant(t, profile, sec, theta=IDEAL_THETA, s_1Z=s_1Z)


# ---------------------------------------------------------------------------
# leakage and key length


def ec_leakage(n_Z: float, qber_Z: float) -> float:
    """Bits revealed by error correction.

    Rate-2/3 LDPC code up to 3 % QBER (one third of the sifted key), above
    that 1.16 n_Z h(Q).
    """
    if not (0.0 <= qber_Z <= 0.5):
        raise ValueError(f"qber_Z must lie in [0, 0.5], got {qber_Z}")
    if qber_Z <= LDPC_MAX_QBER:
        return n_Z / LDPC_LEAK_DIVISOR
    return FALLBACK_EC_EFFICIENCY * n_Z * binary_entropy(qber_Z)


def security_penalty(sec: SecurityParams) -> float:
    return 6.0 * math.log2(EPS_SPLIT / sec.eps_sec) + math.log2(2.0 / sec.eps_corr)


def key_length_raw(s_0Z, s_1Z, phi_Z, lambda_EC, sec: SecurityParams, p_c_star: float = 0.0) -> float:
    """Unfloored, unclamped key length including the (1 - p_c*) discount."""
    if min(s_0Z, s_1Z, lambda_EC) < 0:
        raise ValueError("counts and leakage must be non-negative")
    if not (0.0 <= phi_Z <= 0.5):
        raise ValueError(f"phi_Z must lie in [0, 0.5], got {phi_Z}")
    if not (0.0 <= p_c_star <= 1.0):
        raise ValueError("p_c_star must lie in [0, 1]")
    core = s_1Z * (1.0 - binary_entropy(phi_Z)) - lambda_EC - security_penalty(sec)
    return core * (1.0 - p_c_star)


def key_length(s_0Z, s_1Z, phi_Z, lambda_EC, sec: SecurityParams, p_c_star: float = 0.0) -> int:
    """l = max(0, floor((s_1Z (1 - h(phi)) - lambda - 6 log2(19/eps_sec)
    - log2(2/eps_corr)) (1 - p_c*)))."""
    return max(0, math.floor(key_length_raw(s_0Z, s_1Z, phi_Z, lambda_EC, sec, p_c_star)))


@dataclass
class KeyReport:
    s_0Z: float
    s_1Z: float
    phi_Z: float
    qber_Z: float
    lambda_EC: float
    l: int
    l_raw: float
    skr: float
    n_Z: float
    p_c_star: float
    elapsed_pulses: float
    repetition_rate: float
    intermediates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_row(self, fiber_length: float, attenuation_db: float) -> dict:
        """Row in results-table column order."""
        seconds = self.elapsed_pulses / self.repetition_rate if self.repetition_rate else 0.0
        sifted = self.n_Z / seconds / 1e3 if seconds else 0.0
        return {
            "fiber_length_km": fiber_length,
            "attenuation_db": attenuation_db,
            "sifted_key_rate_kbps": sifted,
            "phi_Z_percent": 100 * self.phi_Z,
            "Q_Z_percent": 100 * self.qber_Z,
            "skr_kbps": self.skr / 1e3,
        }


def distill(
    t: TallySet,
    profile: SourceProfile,
    model: LinkModel,
    sec: SecurityParams = SecurityParams(),
    p_c_star: float = 0.0,
) -> KeyReport:
    t.validate()
    db = decoy_bounds(t, profile, sec)
    n_z = db.n_Z
    q = db.m_Z / n_z if n_z > 0 else 0.0
    empty = KeyReport(db.s_0Z, db.s_1Z, 0.5, q, 0.0, 0, 0.0, 0.0, n_z, p_c_star, t.elapsed_pulses, model.repetition_rate)
    if n_z <= 0 or db.insufficient:
        empty.intermediates = {"decoy": asdict(db), "reason": "insufficient statistics"}
        return empty
    try:
        pe = phase_error_loss_tolerant(t, profile, sec, s_1Z=db.s_1Z)
    except ValueError as exc:
        if "required" in str(exc):
            empty.intermediates = {"decoy": asdict(db), "reason": str(exc)}
            return empty
        raise
    lam = ec_leakage(n_z, min(q, 0.5))
    raw = key_length_raw(db.s_0Z, db.s_1Z, pe.phi, lam, sec, p_c_star)
    ell = max(0, math.floor(raw))
    skr = ell * model.repetition_rate / t.elapsed_pulses if t.elapsed_pulses else 0.0
    return KeyReport(
        s_0Z=db.s_0Z,
        s_1Z=db.s_1Z,
        phi_Z=pe.phi,
        qber_Z=q,
        lambda_EC=lam,
        l=ell,
        l_raw=raw,
        skr=skr,
        n_Z=n_z,
        p_c_star=p_c_star,
        elapsed_pulses=t.elapsed_pulses,
        repetition_rate=model.repetition_rate,
        intermediates={
            "decoy": asdict(db),
            "phase_error": asdict(pe),
            "security_penalty_bits": security_penalty(sec),
            "eps_sec": sec.eps_sec,
            "eps_corr": sec.eps_corr,
        },
    )


# ---------------------------------------------------------------------------
# tally reconstruction from summary operating points


def _depolarise(t: TallySet, visibility: float, bob_basis: int, states) -> None:
    """Shrink the error fraction of the selected cells towards 1/2."""
    for j in states:
        n = t.n[j, bob_basis]
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.where(n > 0, t.m[j, bob_basis] / n, 0.0)
        t.m[j, bob_basis] = n * (1.0 - visibility * (1.0 - 2.0 * e)) / 2.0


def reconstruct_tallies(
    sifted_rate: float,
    qber_Z: float,
    block_bits: float,
    profile: SourceProfile,
    dark_rate: float = 191.0,
    repetition_rate: float = 5e9,
    p_basis_bob_Z: float = 0.5,
    phi_target: float | None = None,
    sec: SecurityParams = SecurityParams(),
) -> tuple[TallySet, LinkModel]:
    """Build expected tallies matching a sifted Z-Z rate (bits/s) and QBER.

    The end-to-end transmittance is solved so the analytic Z-Z rate equals
    ``sifted_rate``; counts split over intensities by their analytic gains.
    Extra noise beyond the state-preparation flaws is a depolarizing channel
    with visibility set by ``qber_Z``.  In the X basis the same visibility is
    used unless ``phi_target`` is given, in which case the X visibility is
    tuned so the loss-tolerant estimate returns it; targets below what a
    noise-free X basis yields are clamped to that floor.  The block spans as
    many pulses as it takes to collect ``block_bits`` sifted bits.
    """
    if not (sifted_rate > 0 and block_bits > 0):
        raise ValueError("sifted_rate and block_bits must be positive")
    if not (0.0 <= qber_Z < 0.5):
        raise ValueError("qber_Z must lie in [0, 0.5)")
    src = profile.uncorrelated()

    def link(eta):
        return LinkModel(
            fiber_length=0.0,
            bob_insertion_loss=-10.0 * math.log10(eta),
            detector_efficiency=1.0,
            dark_rate=dark_rate,
            repetition_rate=repetition_rate,
            p_basis_bob_Z=p_basis_bob_Z,
        )

    def rate(eta):
        return run_analytic(src, link(eta), 1.0).n_zz * repetition_rate

    lo, hi = 1e-12, 1.0
    if rate(hi) < sifted_rate:
        raise ValueError("sifted rate exceeds what a lossless link delivers")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if rate(mid) < sifted_rate else (lo, mid)
        if hi / lo - 1 < 1e-12:
            break
    model = link(math.sqrt(lo * hi))
    per_pulse = run_analytic(src, model, 1.0).n_zz
    t = run_analytic(src, model, block_bits / per_pulse)

    z_states = [j for j in range(3) if STATE_BASIS[j] == "Z"]
    n_z = t.n[z_states, 0].sum()
    m_z = t.m[z_states, 0].sum()
    floor = m_z / n_z
    if qber_Z < floor - 1e-12:
        raise ValueError(f"QBER {qber_Z} below the flaw-and-dark floor {floor:.5f}")
    visibility = (1.0 - 2.0 * qber_Z) * n_z / (n_z - 2.0 * m_z)
    _depolarise(t, visibility, 0, range(3))
    if phi_target is None:
        _depolarise(t, visibility, 1, range(3))
        return t, model

    s1 = decoy_bounds(t, profile, sec).s_1Z
    clean = TallySet(t.n.copy(), t.m.copy(), t.n_sent.copy(), t.elapsed_pulses)

    def phi_at(v):
        trial = TallySet(clean.n.copy(), clean.m.copy(), clean.n_sent.copy(), clean.elapsed_pulses)
        _depolarise(trial, v, 1, range(3))
        return trial, phase_error_loss_tolerant(trial, profile, sec, s_1Z=s1).phi

    lo, hi = 0.0, 1.0
    best, phi_hi = phi_at(hi)
    if phi_hi >= phi_target:
        return best, model
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        trial, phi = phi_at(mid)
        if phi > phi_target:
            lo = mid
        else:
            hi, best = mid, trial
    return best, model
