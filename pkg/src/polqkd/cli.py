"""Command-line entry point: simulate, distill, characterize, optimize.

Exit codes: 0 success, 2 configuration or input-schema error, 3 runtime or
invariant failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .characterization import (
    QwpTrace,
    VisibilityCurve,
    characterize_trace,
    decoy_correlation_stats,
    estimate_pc,
    intensity_samples_from_csv,
)
from .config import ConfigError, bundled_config, load_config
from .distillation import distill
from .optimizer import optimize
from .protocol import SCHEMA_VERSION, TallySet, run_analytic, run_monte_carlo

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    """Input file that does not match its documented schema."""


def _config(arg: str):
    path = Path(arg)
    if not path.exists() and not path.suffix:
        path = bundled_config(arg)
    return load_config(path)


def _emit(doc: dict, out: Path | None, name: str) -> None:
    text = json.dumps(doc, indent=2)
    if out is None:
        print(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text + "\n")


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    if args.pulses is not None:
        cfg.pulses = args.pulses
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if cfg.mode == "analytic":
        tallies = run_analytic(cfg.profile, cfg.link, cfg.pulses)
    else:
        tallies = run_monte_carlo(cfg.profile, cfg.link, cfg.pulses, cfg.seed, threads=args.threads)
    tallies.validate()
    report = distill(tallies, cfg.profile, cfg.link, cfg.security, cfg.p_c_star)
    resolved = cfg.resolved()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": resolved,
        "tallies": tallies.to_dict(),
        "report": report.to_dict(),
        "summary": report.summary_row(cfg.link.fiber_length, cfg.link.fiber_length * cfg.link.attenuation_coeff),
    }
    out = Path(args.out) if args.out else None
    _emit(doc, out, "report.json")
    if out is not None:
        (out / "tallies.csv").write_text(tallies.to_csv([f"config={json.dumps(resolved)}"]))
    return EXIT_OK


def _load_tallies(path: str) -> TallySet:
    text = _read_text(path)
    try:
        if path.endswith(".json"):
            doc = json.loads(text)
            return TallySet.from_dict(doc.get("tallies", doc))
        return TallySet.from_csv(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_distill(args) -> int:
    cfg = _config(args.config)
    tallies = _load_tallies(args.tallies)
    tallies.validate()
    report = distill(tallies, cfg.profile, cfg.link, cfg.security, cfg.p_c_star)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.resolved(),
        "report": report.to_dict(),
        "summary": report.summary_row(cfg.link.fiber_length, cfg.link.fiber_length * cfg.link.attenuation_coeff),
    }
    _emit(doc, Path(args.out) if args.out else None, "report.json")
    return EXIT_OK


def cmd_characterize(args) -> int:
    doc: dict = {"schema_version": SCHEMA_VERSION}
    try:
        if args.qwp:
            trace = QwpTrace.from_csv(_read_text(args.qwp))
            doc["polarization"] = characterize_trace(trace).to_dict()
        if args.intensity:
            values, labels = intensity_samples_from_csv(_read_text(args.intensity))
            doc["intensity"] = decoy_correlation_stats(values, labels).to_dict()
        if args.visibility:
            curve = VisibilityCurve.from_csv(_read_text(args.visibility))
            doc["phase"] = {"p_c_star": estimate_pc(curve)}
    except InputError:
        raise
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _emit(doc, Path(args.out) if args.out else None, "characterization.json")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args.config)
    res = optimize(
        cfg.link,
        cfg.profile,
        cfg.security,
        cfg.block_bits,
        cfg.box,
        cfg.p_c_star,
        grid_only=args.grid_only,
        threads=args.threads,
    )
    doc = {"schema_version": SCHEMA_VERSION, "config": cfg.resolved(), "result": res.to_dict()}
    out = Path(args.out) if args.out else None
    _emit(doc, out, "optimize.json")
    if out is not None:
        header = f"# schema_version={SCHEMA_VERSION}\n# config={json.dumps(cfg.resolved())}\n"
        (out / "trace.csv").write_text(header + res.trace_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polqkd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a run and distill its key")
    s.add_argument("config", help="TOML config path or bundled name")
    s.add_argument("--pulses", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("mc", "analytic"))
    s.add_argument("--threads", type=int, default=1, help="worker processes (results unchanged)")
    s.add_argument("--out", help="output directory (stdout when omitted)")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("distill", help="distill a key from recorded tallies")
    d.add_argument("tallies", help="tally CSV or JSON")
    d.add_argument("config", help="TOML config path or bundled name")
    d.add_argument("--out")
    d.set_defaults(func=cmd_distill)

    c = sub.add_parser("characterize", help="analyse source characterization data")
    c.add_argument("--qwp", help="QWP polarimeter trace CSV")
    c.add_argument("--intensity", help="per-slot intensity samples CSV")
    c.add_argument("--visibility", help="fringe visibility curve CSV")
    c.add_argument("--out")
    c.set_defaults(func=cmd_characterize)

    o = sub.add_parser("optimize", help="optimise protocol parameters for SKR")
    o.add_argument("config", help="TOML config path or bundled name")
    o.add_argument("--grid-only", action="store_true", help="skip golden-section refinement")
    o.add_argument("--threads", type=int, default=1)
    o.add_argument("--out")
    o.set_defaults(func=cmd_optimize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "characterize" and not (args.qwp or args.intensity or args.visibility):
        parser.error("characterize needs at least one of --qwp, --intensity, --visibility")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ZeroDivisionError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
