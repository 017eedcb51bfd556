import numpy as np
import pytest

from polqkd.channel import LinkModel, transmittance
from polqkd.config import bundled_config, load_config
from polqkd.optimizer import PARAMS, SearchBox, evaluate_skr, optimize

REFERENCE_POINT = (0.3, 0.15, 0.6, 0.9)
SMALL = SearchBox(mu0=(0.28, 0.32), mu1=(0.13, 0.17), p_signal=(0.55, 0.65), p_z=(0.85, 0.95))


@pytest.fixture(scope="module")
def cfg():
    return load_config(bundled_config("paper-151km"))


def skr_at(cfg, params):
    return evaluate_skr(cfg.profile, cfg.link, cfg.security, params, cfg.block_bits, cfg.p_c_star)


@pytest.fixture(scope="module")
def small_result(cfg):
    return optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, SMALL, cfg.p_c_star)


class TestSearchBox:
    def test_default_grid(self):
        grid = SearchBox().grid()
        assert len(grid) == 16 * 11 * 5 * 3
        assert REFERENCE_POINT in grid

    def test_empty_region(self):
        with pytest.raises(ValueError, match="empty feasible region"):
            SearchBox(mu0=(0.1, 0.2), mu1=(0.2, 0.3))

    @pytest.mark.parametrize(
        "kw", [{"mu0": (0.4, 0.3)}, {"p_z": (0.5, 1.0)}, {"mu1": (0.0, 0.1)}, {"p_step": 0.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SearchBox(**kw)

    def test_from_dict(self):
        assert SearchBox.from_dict({"mu0": [0.3, 0.35]}).mu0 == (0.3, 0.35)
        with pytest.raises(ValueError, match="unknown"):
            SearchBox.from_dict({"mu2": [0.1, 0.2]})


class TestOptimize:
    def test_dominates_reference_point(self, cfg, small_result):
        assert small_result.skr >= skr_at(cfg, REFERENCE_POINT)
        assert small_result.positive_key

    def test_best_not_below_any_evaluation(self, small_result):
        assert small_result.skr >= max(r["skr"] for r in small_result.trace)

    def test_reported_skr_reproducible(self, cfg, small_result):
        best = tuple(small_result.best[p] for p in PARAMS)
        assert skr_at(cfg, best) == small_result.skr

    def test_mu_ordering_in_trace(self, small_result):
        assert all(r["mu1"] < r["mu0"] for r in small_result.trace)

    def test_within_box(self, small_result):
        for r in small_result.trace:
            for p in PARAMS:
                lo, hi = getattr(SMALL, p)
                assert lo - 1e-12 <= r[p] <= hi + 1e-12

    def test_deterministic(self, cfg, small_result):
        again = optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, SMALL, cfg.p_c_star)
        assert again.best == small_result.best and again.skr == small_result.skr
        assert skr_at(cfg, REFERENCE_POINT) == skr_at(cfg, REFERENCE_POINT)

    def test_grid_only(self, cfg):
        res = optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, SMALL, grid_only=True)
        assert len(res.trace) == len(SMALL.grid())
        assert {r["stage"] for r in res.trace} == {"grid"}

    def test_parallel_matches_serial(self, cfg):
        a = optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, SMALL, grid_only=True)
        b = optimize(cfg.link, cfg.profile, cfg.security, cfg.block_bits, SMALL, grid_only=True, threads=2)
        assert [r["skr"] for r in a.trace] == [r["skr"] for r in b.trace]

    def test_zero_transmittance(self, cfg):
        dead = LinkModel(fiber_length=1e5, dark_rate=0.0)
        assert transmittance(dead) == 0.0
        res = optimize(dead, cfg.profile, cfg.security, cfg.block_bits, SMALL, grid_only=True)
        assert res.skr == 0.0 and not res.positive_key
        assert all(r["skr"] == 0.0 for r in res.trace)

    def test_outputs(self, small_result):
        d = small_result.to_dict()
        assert set(d["best"]) == set(PARAMS)
        lines = small_result.trace_csv().splitlines()
        assert lines[0] == "stage,mu0,mu1,p_signal,p_z,skr"
        assert len(lines) == len(small_result.trace) + 1
        assert np.isfinite(d["skr"])
