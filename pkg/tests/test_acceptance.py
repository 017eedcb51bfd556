"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line; the lines are
also collected and repeated in the pytest terminal summary.
"""
import math
import time
from importlib import resources

import numpy as np
import pytest

from polqkd.bloch import StokesVector
from polqkd.channel import LinkModel
from polqkd.characterization import (
    DEFAULT_QWP_ANGLES,
    QwpTrace,
    VisibilityCurve,
    characterize_trace,
    estimate_pc,
    fit_stokes,
    qwp_forward,
)
from polqkd.config import bundled_config, load_config
from polqkd.distillation import (
    SecurityParams,
    decoy_bounds,
    distill,
    key_length,
    key_length_raw,
    phase_error_loss_tolerant,
    phase_error_uncompensated,
    reconstruct_tallies,
    security_penalty,
)
from polqkd.optimizer import evaluate_skr, optimize
from polqkd.protocol import PA_BLOCK_BITS, run_analytic, run_monte_carlo, sample_tagged_blocks
from polqkd.source import PAPER_MAX_DELTA, PAPER_THETA, default_profile_from_paper

FIXTURES = resources.files("polqkd") / "data" / "fixtures"
SEC = SecurityParams(eps_sec=1e-9, eps_corr=1e-15)
PC_STAR = 0.0019
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def ref():
    return default_profile_from_paper()


def test_criterion_1_key_length_constants():
    start = time.perf_counter()
    l_raw = key_length_raw(0.0, 1e4, 0.0, 0.0, SEC)
    key_length(0.0, 1e4, 0.0, 0.0, SEC)
    elapsed = time.perf_counter() - start
    penalty = 1e4 - l_raw
    ok = abs(penalty - 255.7) <= 0.1 and abs(security_penalty(SEC) - penalty) < 1e-9 and elapsed < 1e-3
    report(1, ok, f"penalty {penalty:.3f} bits (255.7 +/- 0.1), {elapsed * 1e6:.0f} us")


def _table_row(ref, rate, qber, phi):
    start = time.perf_counter()
    t, model = reconstruct_tallies(rate, qber, PA_BLOCK_BITS, ref, phi_target=phi, sec=SEC)
    r = distill(t, ref, model, SEC, PC_STAR)
    return r, time.perf_counter() - start


def test_criterion_2_table_151km(ref):
    r, elapsed = _table_row(ref, 330.0e3, 0.0188, 0.035)
    ok = 38e3 <= r.skr <= 71e3 and elapsed < 1.0
    report(
        2, ok,
        f"SKR {r.skr / 1e3:.1f} kbps in [38, 71], phi_Z {100 * r.phi_Z:.2f}%, {elapsed:.2f} s",
    )


def test_criterion_3_table_101km(ref):
    r, elapsed = _table_row(ref, 2320.2e3, 0.0193, 0.0367)
    lo, hi = 392.7 * 0.7, 392.7 * 1.3
    ok = lo * 1e3 <= r.skr <= hi * 1e3
    report(3, ok, f"SKR {r.skr / 1e3:.1f} kbps in [{lo:.1f}, {hi:.1f}], {elapsed:.2f} s")


def test_criterion_4_end_to_end_monte_carlo():
    cfg = load_config(bundled_config("paper-151km"))
    start = time.perf_counter()
    t = run_monte_carlo(cfg.profile, cfg.link, 100_000_000, seed=cfg.seed)
    elapsed = time.perf_counter() - start
    rate = t.n_zz / (t.elapsed_pulses / cfg.link.repetition_rate)
    q = t.m[:2, 0].sum() / t.n_zz
    ok = 0.7 * 330e3 <= rate <= 1.3 * 330e3 and 0.01 <= q <= 0.03 and elapsed < 60
    report(4, ok, f"sifted {rate / 1e3:.1f} kbps (330 +/- 30%), Q_Z {100 * q:.2f}% in [1, 3], {elapsed:.1f} s")


def test_criterion_5_decoy_soundness():
    cfg = load_config(bundled_config("paper-151km"))
    prof = cfg.profile.uncorrelated()
    model = cfg.link
    per_pulse = run_analytic(prof, model, 1.0).n_zz
    pulses = int(1e5 / per_pulse)
    blocks = sample_tagged_blocks(prof, model, pulses, 10_000, seed=11)
    truth = blocks.true_single_photon_zz()
    violations, n_z = 0, []
    for i in range(len(blocks)):
        t = blocks.tally(i)
        n_z.append(t.n_zz)
        if decoy_bounds(t, prof, SEC).s_1Z > truth[i]:
            violations += 1
    ok = violations == 0
    report(5, ok, f"{violations} violations in {len(blocks)} blocks, mean n_Z {np.mean(n_z):.3g}")


def test_criterion_6_loss_tolerant(ref):
    # SPF angles only: no pattern correlations, no dark counts, no misalignment
    prof = ref.uncorrelated()
    t = run_analytic(prof, LinkModel(fiber_length=151.5, dark_rate=0.0), 1e16)
    s1 = decoy_bounds(t, prof, SEC).s_1Z
    lt = phase_error_loss_tolerant(t, prof, SEC, s_1Z=s1).phi
    naive = phase_error_uncompensated(t, prof, SEC, s_1Z=s1).phi
    ok = lt <= 1e-3 and naive > lt
    report(6, ok, f"loss-tolerant {100 * lt:.3f}% (<= 0.1 pp), naive {100 * naive:.2f}%")


def test_criterion_7_polarimetry():
    rng = np.random.default_rng(7)
    direction = rng.normal(size=(1000, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    s0 = rng.uniform(0.1, 10.0, 1000)
    dop = np.where(np.arange(1000) % 2 == 0, 1.0, rng.uniform(0.0, 1.0, 1000))
    stokes = np.column_stack([s0, (s0 * dop)[:, None] * direction])
    vals = np.array([[qwp_forward(StokesVector(*s), a) for a in DEFAULT_QWP_ANGLES] for s in stokes])
    trace = QwpTrace(np.array(DEFAULT_QWP_ANGLES), vals, np.zeros(1000, dtype=int))
    fitted = np.array([fit_stokes(trace, i).as_array() for i in range(1000)])
    err = np.max(np.abs(fitted - stokes) / s0[:, None])

    rep = characterize_trace(QwpTrace.from_csv((FIXTURES / "qwp-trace.csv").read_text()))
    d_theta = np.max(np.abs(rep.theta - PAPER_THETA))
    d_delta = np.max(np.abs(rep.max_delta - PAPER_MAX_DELTA))
    ok = err < 1e-6 and d_theta <= 0.1 and d_delta <= 0.1
    report(
        7, ok,
        f"round trip {err:.1e}, theta {np.round(rep.theta, 2).tolist()}, "
        f"max delta {np.round(rep.max_delta, 2).tolist()} (within 0.1 deg: {d_theta:.3f}, {d_delta:.3f})",
    )


def test_criterion_8_phase_randomization(ref):
    pc = estimate_pc(VisibilityCurve.from_csv((FIXTURES / "visibility.csv").read_text()))
    t, model = reconstruct_tallies(330.0e3, 0.0188, PA_BLOCK_BITS, ref, sec=SEC)
    r = distill(t, ref, model, SEC)
    args = (r.s_0Z, r.s_1Z, r.phi_Z, r.lambda_EC, SEC)
    base = key_length_raw(*args)
    disc = key_length_raw(*args, p_c_star=pc)
    ok = pc == 0.0019 and disc == base * 0.9981 and key_length(*args, p_c_star=pc) == math.floor(base * 0.9981)
    report(8, ok, f"p_c* {pc}, l_raw {disc:.1f} = {base:.1f} x 0.9981 exactly: {disc == base * 0.9981}")


def test_criterion_9_mc_vs_analytic():
    worst, bad = 0.0, []
    for name in ("paper-151km", "paper-101km", "ideal-lossless"):
        cfg = load_config(bundled_config(name))
        pulses = 10_000_000
        mc = run_monte_carlo(cfg.profile, cfg.link, pulses, seed=cfg.seed)
        an = run_analytic(cfg.profile, cfg.link, pulses)
        for label, x, y in (("n", an.n, mc.n), ("m", an.m, mc.m), ("n_sent", an.n_sent, mc.n_sent)):
            dev = np.abs(y - x)
            zero = x < 1e-9
            if np.any(dev[zero] > 0):
                bad.append(f"{name}:{label} (nonzero where expected 0)")
            z = np.where(zero, 0.0, dev / np.sqrt(np.where(zero, 1.0, x)))
            worst = max(worst, float(z.max()))
            if z.max() > 3.0:
                bad.append(f"{name}:{label} z={z.max():.2f}")
    report(9, not bad, f"max |z| {worst:.2f} over 3 configs at 1e7 pulses" + (f"; {bad}" if bad else ""))


def test_criterion_10_optimizer_dominance():
    cfg = load_config(bundled_config("paper-151km"))
    point = evaluate_skr(cfg.profile, cfg.link, cfg.security, (0.3, 0.15, 0.6, 0.9), cfg.block_bits, cfg.p_c_star)
    start = time.perf_counter()
    res = optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, cfg.box, cfg.p_c_star)
    elapsed = time.perf_counter() - start
    ok = res.skr >= point
    best = {k: round(v, 4) for k, v in res.best.items()}
    report(
        10, ok,
        f"optimum {res.skr / 1e3:.1f} kbps at {best} >= reference point {point / 1e3:.1f} kbps, {elapsed:.0f} s",
    )
