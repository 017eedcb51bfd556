"""Regenerate the bundled characterization and tally fixtures.

Run from the repository root:  python scripts/make_fixtures.py
Every file is a deterministic function of the default transmitter profile.
"""
from pathlib import Path

import numpy as np

from polqkd.characterization import (
    VisibilityCurve,
    intensity_samples_to_csv,
    profile_trace,
    synthetic_intensity_samples,
)
from polqkd.distillation import reconstruct_tallies
from polqkd.protocol import PA_BLOCK_BITS
from polqkd.source import PAPER_PC_STAR, default_profile_from_paper

OUT = Path(__file__).resolve().parents[1] / "src" / "polqkd" / "data" / "fixtures"


def visibility_curve() -> VisibilityCurve:
    delays = np.linspace(-3.0, 3.0, 13)
    # power-of-two CW visibilities keep v_pulsed / v_cw exact in binary
    v_cw = np.array([0.25, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25])
    ratio = np.array([0.0003, 0.0005, 0.0008, 0.0012, 0.0016, 0.0018, PAPER_PC_STAR,
                      0.0017, 0.0014, 0.0011, 0.0007, 0.0004, 0.0002])
    return VisibilityCurve(delays, v_cw, ratio * v_cw)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    profile = default_profile_from_paper()
    (OUT / "qwp-trace.csv").write_text(profile_trace(profile, seed=2019).to_csv())
    values, labels = synthetic_intensity_samples(profile.with_params(p_signal=0.5), 4096, seed=2019)
    (OUT / "intensity-samples.csv").write_text(intensity_samples_to_csv(values, labels))
    (OUT / "visibility.csv").write_text(visibility_curve().to_csv())
    for name, rate, q in (("151km", 330.0e3, 0.0188), ("101km", 2320.2e3, 0.0193)):
        tallies, _ = reconstruct_tallies(rate, q, PA_BLOCK_BITS, profile)
        (OUT / f"tallies-{name}.csv").write_text(tallies.to_csv())


if __name__ == "__main__":
    main()
