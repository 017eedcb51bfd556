"""End-to-end three-state protocol: emission, channel, detection, sifting.

Two engines produce a :class:`TallySet`: ``run_analytic`` sums exact click
probabilities over every (state, previous state, intensity, previous
intensity) class, ``run_monte_carlo`` samples pulses in fixed-size shards,
each with its own RNG substream so results never depend on parallelism.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import (
    LinkModel,
    click_probabilities_theta,
    outcome_probabilities,
    PATTERNS,
    pattern_probabilities,
    projection_probabilities,
    transmittance,
)
from .source import (
    INTENSITIES,
    STATE_BASIS,
    STATE_BIT,
    STATES,
    SourceProfile,
    emit_block,
)

SCHEMA_VERSION = 1
BASES = ("Z", "X")
PA_BLOCK_BITS = 4192 * 1944
SHARD_SIZE = 10_000_000
CHUNK_SIZE = 1 << 20

# outcome index -> (Bob basis, Bob bit); outcome 4 is "no click"
OUTCOME_BASIS = np.array([0, 0, 1, 1])
OUTCOME_BIT = np.array([0, 1, 0, 1])


@dataclass
class TallySet:
    """Detection and error counts per (Alice state, Bob basis, intensity).

    ``m`` counts events whose Bob bit (Z0/X+ -> 0, Z1/X- -> 1) differs from
    the bit of Alice's state (|0>,|+> -> 0, |1> -> 1).  ``n_sent`` is the
    number of pulses per (state, intensity).
    """

    n: np.ndarray = field(default_factory=lambda: np.zeros((3, 2, 2)))
    m: np.ndarray = field(default_factory=lambda: np.zeros((3, 2, 2)))
    n_sent: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))
    elapsed_pulses: float = 0

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float).reshape(3, 2, 2)
        self.m = np.asarray(self.m, dtype=float).reshape(3, 2, 2)
        self.n_sent = np.asarray(self.n_sent, dtype=float).reshape(3, 2)

    def validate(self) -> None:
        if np.any(self.n < 0) or np.any(self.m < 0) or np.any(self.n_sent < 0):
            raise ValueError("tallies must be non-negative")
        if np.any(self.m > self.n):
            bad = [
                f"{STATES[j]}/{BASES[b]}/{INTENSITIES[a]}"
                for j, b, a in zip(*np.nonzero(self.m > self.n))
            ]
            raise ValueError(f"error count exceeds detections in cells {bad}")
        if self.n.sum() > self.elapsed_pulses + 1e-9:
            raise ValueError("more detections than emitted pulses")

    def __add__(self, other: "TallySet") -> "TallySet":
        return TallySet(
            self.n + other.n,
            self.m + other.m,
            self.n_sent + other.n_sent,
            self.elapsed_pulses + other.elapsed_pulses,
        )

    def scaled(self, factor: float) -> "TallySet":
        return TallySet(self.n * factor, self.m * factor, self.n_sent * factor, self.elapsed_pulses * factor)

    def basis_counts(self, basis_a: str, basis_b: str, intensity=None) -> tuple[float, float]:
        """(n, m) summed over Alice states of ``basis_a``."""
        js = [j for j in range(3) if STATE_BASIS[j] == basis_a]
        b = BASES.index(basis_b)
        a = slice(None) if intensity is None else _intensity_index(intensity)
        return float(self.n[js, b][..., a].sum()), float(self.m[js, b][..., a].sum())

    @property
    def n_zz(self) -> float:
        return self.basis_counts("Z", "Z")[0]

    @property
    def total_clicks(self) -> float:
        return float(self.n.sum())

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        cells = []
        for j, s in enumerate(STATES):
            for b, basis in enumerate(BASES):
                for a, inten in enumerate(INTENSITIES):
                    cells.append(
                        {
                            "alice_state": s,
                            "alice_basis": STATE_BASIS[j],
                            "bob_basis": basis,
                            "intensity": inten,
                            "n": _num(self.n[j, b, a]),
                            "m": _num(self.m[j, b, a]),
                        }
                    )
        sent = [
            {"alice_state": s, "intensity": inten, "n_sent": _num(self.n_sent[j, a])}
            for j, s in enumerate(STATES)
            for a, inten in enumerate(INTENSITIES)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "elapsed_pulses": _num(self.elapsed_pulses),
            "cells": cells,
            "sent": sent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TallySet":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported tally schema_version {d.get('schema_version')!r}")
        t = cls(elapsed_pulses=float(d["elapsed_pulses"]))
        for c in d["cells"]:
            j, b, a = STATES.index(c["alice_state"]), BASES.index(c["bob_basis"]), _intensity_index(c["intensity"])
            t.n[j, b, a] = float(c["n"])
            t.m[j, b, a] = float(c["m"])
        for c in d.get("sent", []):
            t.n_sent[STATES.index(c["alice_state"]), _intensity_index(c["intensity"])] = float(c["n_sent"])
        return t

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, comments: list[str] = ()) -> str:
        """CSV table; ``comments`` become extra ``#`` lines after the header line."""
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION} elapsed_pulses={_num(self.elapsed_pulses)}\n")
        for c in comments:
            buf.write(f"# {c}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for j, s in enumerate(STATES):
            for b, basis in enumerate(BASES):
                for a, inten in enumerate(INTENSITIES):
                    w.writerow(
                        [s, STATE_BASIS[j], basis, inten, _num(self.n[j, b, a]), _num(self.m[j, b, a]), _num(self.n_sent[j, a])]
                    )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TallySet":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("line 1: missing '# schema_version=... elapsed_pulses=...' header")
        try:
            meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
            version = int(meta.get("schema_version", -1))
            elapsed = float(meta["elapsed_pulses"])
        except (ValueError, KeyError):
            raise ValueError("line 1: malformed '# schema_version=... elapsed_pulses=...' header") from None
        if version != SCHEMA_VERSION:
            raise ValueError(f"line 1: unsupported schema_version {meta.get('schema_version')}")
        t = cls(elapsed_pulses=elapsed)
        skip = 1
        while skip < len(lines) and lines[skip].startswith("#"):
            skip += 1
        reader = csv.DictReader(lines[skip:])
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"line {skip + 1}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=skip + 2):
            try:
                j = STATES.index(row["alice_state"])
                b = BASES.index(row["bob_basis"])
                a = _intensity_index(row["intensity"])
                t.n[j, b, a] = float(row["n"])
                t.m[j, b, a] = float(row["m"])
                t.n_sent[j, a] = float(row["n_sent"])
            except (ValueError, TypeError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return t


CSV_HEADER = ["alice_state", "alice_basis", "bob_basis", "intensity", "n", "m", "n_sent"]


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def _intensity_index(intensity) -> int:
    if isinstance(intensity, (int, np.integer)):
        return int(intensity)
    return INTENSITIES.index(intensity)


def qber(t: TallySet, basis_a: str = "Z", basis_b: str = "Z", intensity=None) -> float:
    n, m = t.basis_counts(basis_a, basis_b, intensity)
    if n <= 0:
        raise ZeroDivisionError(f"no {basis_a}{basis_b} detections to form an error rate")
    return m / n


# ---------------------------------------------------------------------------
# analytic expectation mode


def class_table(profile: SourceProfile):
    """Stationary classes (j, k, a, b) with their probabilities, angles and
    intensities, flattened to 1-D arrays of length 36."""
    j, k, a, b = np.meshgrid(np.arange(3), np.arange(3), np.arange(2), np.arange(2), indexing="ij")
    j, k, a, b = (x.ravel() for x in (j, k, a, b))
    prob = profile.p_state[j] * profile.p_state[k] * profile.p_intensity[a] * profile.p_intensity[b]
    theta = profile.theta_avg[j] + profile.delta[j, k]
    mu = profile.mu_cond[a, b]
    return j, a, prob, theta, mu


def _dead_time_factor(p_raw: np.ndarray, weights: np.ndarray, slots: int) -> np.ndarray:
    """Probability that a detector was silent for the preceding ``slots`` gates,
    treating successive gates as independent."""
    if slots == 0:
        return np.ones(4)
    mean_rate = weights @ p_raw
    return (1.0 - mean_rate) ** slots


def run_analytic(profile: SourceProfile, model: LinkModel, n_pulses: float) -> TallySet:
    """Expected tallies (real-valued) after ``n_pulses`` pulses.

    With dead time the registered click probability is approximated as
    p_d * (1 - <p_d>)^D, neglecting correlations between successive gates.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    t = transmittance(model)
    j, a, prob, theta, mu = class_table(profile)
    # first pulse of the stream has no predecessor
    j0, a0 = np.meshgrid(np.arange(3), np.arange(2), indexing="ij")
    j0, a0 = j0.ravel(), a0.ravel()
    prob0 = profile.p_state[j0] * profile.p_intensity[a0]
    theta0 = profile.theta_avg[j0]
    mu0 = profile.mu[a0]

    js = np.concatenate([j, j0])
    as_ = np.concatenate([a, a0])
    weight = np.concatenate([prob * (n_pulses - 1), prob0])
    p_raw = click_probabilities_theta(np.concatenate([theta, theta0]), np.concatenate([mu, mu0]), model, t)
    p_reg = p_raw * _dead_time_factor(p_raw, weight / n_pulses, model.dead_slots)
    out = outcome_probabilities(p_reg)[:, :4]

    tally = TallySet(elapsed_pulses=float(n_pulses))
    np.add.at(tally.n_sent, (js, as_), weight)
    for d in range(4):
        b = OUTCOME_BASIS[d]
        cnt = weight * out[:, d]
        np.add.at(tally.n, (js, np.full_like(js, b), as_), cnt)
        err = np.array(STATE_BIT)[js] != OUTCOME_BIT[d]
        np.add.at(tally.m, (js[err], np.full(err.sum(), b), as_[err]), cnt[err])
    return tally


# ---------------------------------------------------------------------------
# Monte Carlo mode


def shard_layout(n_pulses: int, shard_size: int = SHARD_SIZE) -> list[int]:
    full, rest = divmod(int(n_pulses), shard_size)
    return [shard_size] * full + ([rest] if rest else [])


def shard_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _squash(fired: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Outcome index per row of a (N, 4) boolean firing matrix; 4 = no click."""
    k = fired.sum(axis=1)
    out = np.full(len(fired), 4, dtype=np.int8)
    hit = k > 0
    if not hit.any():
        return out
    f = fired[hit]
    kk = k[hit]
    pick = np.minimum((rng.random(len(kk)) * kk).astype(np.int64), kk - 1)
    csum = np.cumsum(f, axis=1)
    out[hit] = np.argmax(csum > pick[:, None], axis=1)
    return out


@dataclass
class _Events:
    index: np.ndarray
    state: np.ndarray
    intensity: np.ndarray
    outcome: np.ndarray


def _firing_tables(profile, model):
    """Per-class probability that any detector fires, and the cumulative
    distribution of the 15 non-empty firing patterns given that one did.

    Rows 0..35 are the stationary classes of ``class_table``; rows 36..41 the
    predecessor-free first pulse (state, intensity).
    """
    t = transmittance(model)
    _, _, _, theta, mu = class_table(profile)
    j0, a0 = np.meshgrid(np.arange(3), np.arange(2), indexing="ij")
    theta = np.concatenate([theta, profile.theta_avg[j0.ravel()]])
    mu = np.concatenate([mu, profile.mu[a0.ravel()]])
    pat = pattern_probabilities(click_probabilities_theta(theta, mu, model, t))
    p_any = 1.0 - pat[:, 0]
    cond = np.cumsum(pat[:, 1:], axis=1) / np.where(p_any > 0, p_any, 1.0)[:, None]
    cond[:, -1] = 1.0
    return p_any, cond


def _shard_events(profile, model, n, rng, chunk=CHUNK_SIZE):
    """Yield (pulse labels, events) per chunk of one shard timeline.

    Labels are the (state, intensity) arrays of every emitted pulse; event
    indices are positions within the shard.
    """
    p_any, cond = _firing_tables(profile, model)
    slots = model.dead_slots
    last_raw = np.full(4, -(10**18), dtype=np.int64)
    prev = None
    done = 0
    while done < n:
        size = min(chunk, n - done)
        blk = emit_block(profile, size, rng, prev=prev, offset=done)
        prev = (int(blk.state[-1]), int(blk.intensity[-1]))
        cls = ((blk.state.astype(np.int64) * 3 + blk.prev_state) * 2 + blk.intensity) * 2 + blk.prev_intensity
        if blk.prev_state[0] < 0:
            cls[0] = 36 + blk.state[0] * 2 + blk.intensity[0]
        rows = np.nonzero(rng.random(size) < p_any[cls])[0]
        c = cls[rows]
        u = rng.random(len(rows))
        pattern = 1 + (u[:, None] >= cond[c]).sum(axis=1)
        fired = PATTERNS[np.minimum(pattern, 15)]
        if slots:
            fired = _apply_dead_time_events(fired, rows + done, last_raw, slots)
        outcome = _squash(fired, rng)
        keep = outcome < 4
        idx = rows[keep]
        yield (blk.state, blk.intensity), _Events(idx + done, blk.state[idx], blk.intensity[idx], outcome[keep])
        done += size


def _sent_counts(state, intensity) -> np.ndarray:
    return np.bincount(state.astype(np.int64) * 2 + intensity, minlength=6).reshape(3, 2).astype(float)


def _apply_dead_time_events(fired, index, last_raw, slots):
    """Paralyzable dead time on raw firings at absolute gate ``index``: a
    firing registers only if that detector had no raw firing in the
    preceding ``slots`` gates.  Updates ``last_raw`` in place."""
    reg = np.zeros_like(fired)
    for d in range(4):
        sel = np.nonzero(fired[:, d])[0]
        if not len(sel):
            continue
        idx = index[sel]
        prev = np.concatenate([[last_raw[d]], idx[:-1]])
        reg[sel[idx - prev > slots], d] = True
        last_raw[d] = idx[-1]
    return reg


def _tally_events(ev: _Events, tally: TallySet) -> None:
    b = OUTCOME_BASIS[ev.outcome]
    err = np.array(STATE_BIT)[ev.state] != OUTCOME_BIT[ev.outcome]
    np.add.at(tally.n, (ev.state, b, ev.intensity), 1)
    np.add.at(tally.m, (ev.state[err], b[err], ev.intensity[err]), 1)


def _run_shard(args) -> TallySet:
    profile, model, n, seed, index = args
    rng = shard_rng(seed, index)
    tally = TallySet(elapsed_pulses=n)
    for labels, ev in _shard_events(profile, model, n, rng):
        tally.n_sent += _sent_counts(*labels)
        _tally_events(ev, tally)
    return tally


def run_monte_carlo(
    profile: SourceProfile,
    model: LinkModel,
    n_pulses: int,
    seed: int,
    threads: int = 1,
    shard_size: int = SHARD_SIZE,
) -> TallySet:
    """Sample ``n_pulses`` pulses.  Shards have a fixed size and their own
    RNG substream, so ``threads`` changes speed but never the result."""
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    jobs = [(profile, model, n, seed, i) for i, n in enumerate(shard_layout(n_pulses, shard_size))]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_shard, jobs))
    else:
        parts = [_run_shard(job) for job in jobs]
    total = TallySet()
    for part in parts:
        total = total + part
    return total


def run_monte_carlo_blocks(
    profile: SourceProfile,
    model: LinkModel,
    max_pulses: int,
    seed: int,
    block_bits: int = PA_BLOCK_BITS,
    shard_size: int = SHARD_SIZE,
):
    """Yield one TallySet per privacy-amplification block of ``block_bits``
    sifted Z-Z detections.  Uses the same shards and substreams as
    ``run_monte_carlo``; a trailing partial block is dropped."""
    z_state = np.array([b == "Z" for b in STATE_BASIS])
    current = TallySet()
    sifted = 0
    for i, n in enumerate(shard_layout(max_pulses, shard_size)):
        rng = shard_rng(seed, i)
        pos = 0
        for (state, intensity), ev in _shard_events(profile, model, n, rng):
            local = ev.index - pos
            zz = z_state[ev.state] & (OUTCOME_BASIS[ev.outcome] == 0)
            e0, p0 = 0, 0
            zz_idx = np.nonzero(zz)[0]
            while len(zz_idx) - np.searchsorted(zz_idx, e0) >= block_bits - sifted:
                cut = zz_idx[np.searchsorted(zz_idx, e0) + block_bits - sifted - 1]
                p1 = int(local[cut]) + 1
                _take(current, ev, e0, cut + 1, state[p0:p1], intensity[p0:p1])
                yield current
                current, sifted = TallySet(), 0
                e0, p0 = cut + 1, p1
            _take(current, ev, e0, len(ev.index), state[p0:], intensity[p0:])
            sifted += int(zz[e0:].sum())
            pos += len(state)


def _take(tally, ev, e0, e1, state, intensity):
    tally.n_sent += _sent_counts(state, intensity)
    tally.elapsed_pulses += len(state)
    _tally_events(_Events(ev.index[e0:e1], ev.state[e0:e1], ev.intensity[e0:e1], ev.outcome[e0:e1]), tally)


# ---------------------------------------------------------------------------
# photon-number-tagged sampling (simulation truth for decoy checks)

PHOTON_CLASSES = ("0", "1", "2+")


def tagged_probabilities(profile: SourceProfile, model: LinkModel) -> np.ndarray:
    """Joint per-pulse probability of (state, intensity, photon class, outcome).

    Shape (3, 2, 3, 5); outcome 4 is no click.  Requires an i.i.d. source
    (no nearest-neighbour correlations) and no dead time.
    """
    if np.any(profile.delta != 0) or not np.allclose(profile.mu_cond, profile.mu[:, None]):
        raise ValueError("tagged sampling needs an uncorrelated profile; use profile.uncorrelated()")
    if model.dead_slots:
        raise ValueError("tagged sampling does not model dead time")
    t = transmittance(model)
    pd = model.p_dark
    dark = np.full(4, pd)
    out_dark = outcome_probabilities(dark)
    with_photon = np.stack([outcome_probabilities(np.where(np.arange(4) == d, 1.0, dark)) for d in range(4)])
    probs = np.zeros((3, 2, 3, 5))
    for j in range(3):
        th = np.radians(profile.theta_avg[j])
        q = t * model.route * projection_probabilities(np.sin(th), np.cos(th), model.misalignment_angle)
        out_one = q @ with_photon + (1.0 - q.sum()) * out_dark
        for a in range(2):
            mu = profile.mu[a]
            w = profile.p_state[j] * profile.p_intensity[a]
            p0, p1 = math.exp(-mu), mu * math.exp(-mu)
            total = outcome_probabilities(click_probabilities_theta(profile.theta_avg[j], mu, model, t))
            multi = np.clip(total - p0 * out_dark - p1 * out_one, 0.0, None)
            probs[j, a] = w * np.stack([p0 * out_dark, p1 * out_one, multi])
    return probs


@dataclass
class TaggedBlocks:
    """Repeated i.i.d. blocks with photon-number truth.

    ``counts`` has shape (blocks, 3 states, 2 intensities, 3 photon classes, 5 outcomes).
    """

    counts: np.ndarray
    n_pulses: int

    def __len__(self):
        return len(self.counts)

    def tally(self, i: int) -> TallySet:
        c = self.counts[i]
        t = TallySet(elapsed_pulses=self.n_pulses)
        t.n_sent = c.sum(axis=(2, 3)).astype(float)
        for d in range(4):
            b = OUTCOME_BASIS[d]
            cnt = c[:, :, :, d].sum(axis=2)
            t.n[:, b, :] += cnt
            for j in range(3):
                if STATE_BIT[j] != OUTCOME_BIT[d]:
                    t.m[j, b, :] += cnt[j]
        return t

    def true_single_photon_zz(self) -> np.ndarray:
        """Z-Z detections caused by single-photon pulses, per block."""
        z = [j for j in range(3) if STATE_BASIS[j] == "Z"]
        return self.counts[:, z][:, :, :, 1, :2].sum(axis=(1, 2, 3))

    def true_vacuum_zz(self) -> np.ndarray:
        z = [j for j in range(3) if STATE_BASIS[j] == "Z"]
        return self.counts[:, z][:, :, :, 0, :2].sum(axis=(1, 2, 3))


def sample_tagged_blocks(
    profile: SourceProfile, model: LinkModel, n_pulses: int, n_blocks: int, seed: int
) -> TaggedBlocks:
    """Draw ``n_blocks`` independent blocks of ``n_pulses`` pulses each.

    Exact for an i.i.d. source: the per-block category counts of independent
    pulses are multinomial.
    """
    probs = tagged_probabilities(profile, model)
    flat = probs.ravel()
    flat = flat / flat.sum()
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(int(n_pulses), flat, size=n_blocks)
    return TaggedBlocks(counts.reshape((n_blocks,) + probs.shape), int(n_pulses))
