"""Search over (mu0, mu1, p_signal, p_Z) maximising the analytic-mode SKR.

A grid scan locates the best cell; coordinate-wise golden-section passes then
refine inside one grid step of it.  The clamped key length is flat at zero
and kinked elsewhere, so nothing here uses derivatives.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import LinkModel
from .distillation import SecurityParams, distill
from .protocol import PA_BLOCK_BITS, run_analytic
from .source import SourceProfile

PARAMS = ("mu0", "mu1", "p_signal", "p_z")
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SearchBox:
    mu0: tuple[float, float] = (0.25, 0.40)
    mu1: tuple[float, float] = (0.10, 0.20)
    p_signal: tuple[float, float] = (0.50, 0.70)
    p_z: tuple[float, float] = (0.85, 0.95)
    mu_step: float = 0.01
    p_step: float = 0.05

    def __post_init__(self):
        for name in PARAMS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if not (0 < self.mu1[0] and self.mu0[1] <= 1.0):
            raise ValueError("intensities must satisfy 0 < mu1 and mu0 <= 1")
        for name in ("p_signal", "p_z"):
            lo, hi = getattr(self, name)
            if not (0 < lo and hi < 1):
                raise ValueError(f"{name} must lie strictly inside (0, 1)")
        if self.mu_step <= 0 or self.p_step <= 0:
            raise ValueError("grid steps must be positive")
        if self.mu1[0] >= self.mu0[1]:
            raise ValueError("empty feasible region: every mu1 >= every mu0")

    def step(self, name: str) -> float:
        return self.mu_step if name.startswith("mu") else self.p_step

    def axis(self, name: str) -> np.ndarray:
        lo, hi = getattr(self, name)
        n = int(math.floor((hi - lo) / self.step(name) + 1e-9))
        return np.round(lo + self.step(name) * np.arange(n + 1), 10)

    def grid(self) -> list[tuple[float, ...]]:
        pts = itertools.product(*(self.axis(n) for n in PARAMS))
        return [tuple(float(x) for x in p) for p in pts if p[1] < p[0]]

    @classmethod
    def from_dict(cls, d: dict) -> "SearchBox":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer fields: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(float(x) for x in v) if k in PARAMS else float(v)
            if k in PARAMS and len(kw[k]) != 2:
                raise ValueError(f"{k} must be a [low, high] pair")
        return cls(**kw)


def evaluate_skr(
    profile: SourceProfile,
    model: LinkModel,
    sec: SecurityParams,
    params,
    block_bits: float = PA_BLOCK_BITS,
    p_c_star: float = 0.0,
) -> float:
    """SKR (bit/s) of analytic tallies collected until one key block is full."""
    mu0, mu1, p_signal, p_z = params
    prof = profile.with_params(mu0=mu0, mu1=mu1, p_signal=p_signal, p_z=p_z)
    per_pulse = run_analytic(prof, model, 1.0).n_zz
    if per_pulse <= 0:
        return 0.0
    t = run_analytic(prof, model, max(1.0, block_bits / per_pulse))
    return distill(t, prof, model, sec, p_c_star).skr


@dataclass
class OptimizeResult:
    best: dict
    skr: float
    positive_key: bool
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"best": self.best, "skr": self.skr, "positive_key": self.positive_key,
                "evaluations": len(self.trace)}

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", *PARAMS, "skr"])
        for row in self.trace:
            w.writerow([row["stage"], *(repr(row[p]) for p in PARAMS), repr(row["skr"])])
        return buf.getvalue()


def _eval_star(args):
    return evaluate_skr(*args)


def optimize(
    model: LinkModel,
    profile: SourceProfile,
    sec: SecurityParams = SecurityParams(),
    block_bits: float = PA_BLOCK_BITS,
    box: SearchBox = SearchBox(),
    p_c_star: float = 0.0,
    grid_only: bool = False,
    threads: int = 1,
    sweeps: int = 2,
    golden_iters: int = 12,
) -> OptimizeResult:
    grid = box.grid()
    if not grid:
        raise ValueError("empty feasible region: no grid point has mu1 < mu0")
    jobs = [(profile, model, sec, p, block_bits, p_c_star) for p in grid]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(_eval_star, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        values = [_eval_star(j) for j in jobs]
    trace = [dict(zip(PARAMS, p), skr=v, stage="grid") for p, v in zip(grid, values)]
    i_best = int(np.argmax(values))
    best, best_skr = list(grid[i_best]), values[i_best]

    if not grid_only and best_skr > 0:
        def f(x):
            v = evaluate_skr(profile, model, sec, x, block_bits, p_c_star)
            trace.append(dict(zip(PARAMS, x), skr=v, stage="refine"))
            return v

        for _ in range(sweeps):
            for d, name in enumerate(PARAMS):
                lo_box, hi_box = getattr(box, name)
                lo = max(lo_box, best[d] - box.step(name))
                hi = min(hi_box, best[d] + box.step(name))
                # keep mu1 < mu0 inside the bracket
                if name == "mu0":
                    lo = max(lo, best[1] + 1e-6)
                if name == "mu1":
                    hi = min(hi, best[0] - 1e-6)
                if hi <= lo:
                    continue
                x, v = _golden(lambda z: f(best[:d] + [z] + best[d + 1:]), lo, hi, golden_iters)
                if v > best_skr:
                    best[d], best_skr = x, v

    return OptimizeResult(
        best=dict(zip(PARAMS, (float(x) for x in best))),
        skr=float(best_skr),
        positive_key=best_skr > 0,
        trace=trace,
    )


def _golden(f, lo: float, hi: float, iters: int) -> tuple[float, float]:
    """Golden-section maximisation on [lo, hi]; returns the best point seen."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    seen = [(fc, c), (fd, d)]
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
            seen.append((fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
            seen.append((fd, d))
    v, x = max(seen)
    return x, v
