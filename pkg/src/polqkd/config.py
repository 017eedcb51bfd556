"""TOML run configuration.

Tables and units:

[source]    preset = "paper" | "ideal"; optional overrides theta (deg, states
            0, 1, +), delta (deg, [state][previous state]), mu (signal, decoy),
            mu_cond ([current][previous]), p_c, p_state, p_intensity
[link]      fiber_length (km), attenuation_coeff (dB/km), bob_insertion_loss
            (dB), detector_efficiency, dark_rate (Hz), dead_time (s),
            repetition_rate (Hz), p_basis_bob_Z, misalignment_angle (deg)
[security]  eps_sec, eps_corr, p_c_star, block_bits
[run]       pulses, seed, mode = "mc" | "analytic"
[optimizer] mu0, mu1, p_signal, p_z as [low, high]; mu_step, p_step
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import LinkModel
from .distillation import SecurityParams
from .optimizer import SearchBox
from .protocol import PA_BLOCK_BITS
from .source import SourceProfile, default_profile_from_paper, ideal_profile

TABLES = {
    "source": {"preset", "theta", "delta", "mu", "mu_cond", "p_c", "p_state", "p_intensity"},
    "link": set(LinkModel.__dataclass_fields__),
    "security": {"eps_sec", "eps_corr", "p_c_star", "block_bits"},
    "run": {"pulses", "seed", "mode"},
    "optimizer": set(SearchBox.__dataclass_fields__),
}
MODES = ("mc", "analytic")


class ConfigError(ValueError):
    """Configuration that does not parse or violates the schema."""


@dataclass
class RunConfig:
    profile: SourceProfile
    link: LinkModel
    security: SecurityParams = field(default_factory=SecurityParams)
    p_c_star: float = 0.0
    block_bits: float = PA_BLOCK_BITS
    pulses: int = 10_000_000
    seed: int = 0
    mode: str = "mc"
    box: SearchBox = field(default_factory=SearchBox)
    source_path: str | None = None

    def resolved(self) -> dict:
        """Every effective setting, for embedding in outputs."""
        box = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.box.__dict__.items()}
        return {
            "source": self.profile.to_dict(),
            "link": self.link.to_dict(),
            "security": {
                "eps_sec": self.security.eps_sec,
                "eps_corr": self.security.eps_corr,
                "p_c_star": self.p_c_star,
                "block_bits": self.block_bits,
            },
            "run": {"pulses": self.pulses, "seed": self.seed, "mode": self.mode},
            "optimizer": box,
        }


def _line_of(text: str, table: str, key: str | None = None) -> int | None:
    """Best-effort line number of ``[table]`` or of ``key`` inside it."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if key is None and current == table:
                return i
            continue
        if current == table and key is not None and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _err(text: str, msg: str, table: str, key: str | None = None) -> ConfigError:
    line = _line_of(text, table, key)
    where = f"line {line}: " if line else ""
    return ConfigError(f"{where}[{table}]{'.' + key if key else ''}: {msg}")


def _blamed_key(msg: str, table: dict) -> str | None:
    """Key of ``table`` named in (or holding the value quoted by) an error message."""
    for key, value in table.items():
        if key in msg or (isinstance(value, str) and repr(value) in msg):
            return key
    return None


def parse_config(text: str, source_path: str | None = None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    for table, value in data.items():
        if table not in TABLES:
            raise _err(text, "unknown table", table)
        if not isinstance(value, dict):
            raise _err(text, "must be a table", table)
        for key in value:
            if key not in TABLES[table]:
                raise _err(text, "unknown key", table, key)

    src = data.get("source", {})
    current = ("source", None)
    try:
        preset = src.get("preset", "paper")
        if preset == "paper":
            profile = default_profile_from_paper()
        elif preset == "ideal":
            profile = ideal_profile()
        else:
            current = ("source", "preset")
            raise ValueError(f"unknown preset {preset!r}; expected 'paper' or 'ideal'")
        profile = _override_profile(profile, src, text)

        current = ("link", None)
        link = LinkModel.from_dict(data.get("link", {}))

        sec_t = data.get("security", {})
        current = ("security", None)
        sec = SecurityParams(
            eps_sec=float(sec_t.get("eps_sec", 1e-9)), eps_corr=float(sec_t.get("eps_corr", 1e-15))
        )
        p_c_star = float(sec_t.get("p_c_star", 0.0))
        if not (0.0 <= p_c_star <= 1.0):
            current = ("security", "p_c_star")
            raise ValueError("must lie in [0, 1]")
        block_bits = float(sec_t.get("block_bits", PA_BLOCK_BITS))
        if block_bits <= 0:
            current = ("security", "block_bits")
            raise ValueError("must be positive")

        run = data.get("run", {})
        current = ("run", None)
        pulses = run.get("pulses", 10_000_000)
        seed = run.get("seed", 0)
        mode = run.get("mode", "mc")
        if not isinstance(pulses, int) or pulses < 1:
            current = ("run", "pulses")
            raise ValueError("must be a positive integer")
        if not isinstance(seed, int) or seed < 0:
            current = ("run", "seed")
            raise ValueError("must be a non-negative integer")
        if mode not in MODES:
            current = ("run", "mode")
            raise ValueError(f"must be one of {MODES}")

        current = ("optimizer", None)
        box = SearchBox.from_dict(data.get("optimizer", {}))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        table, key = current
        if key is None:
            key = _blamed_key(str(exc), data.get(table, {}))
        raise _err(text, str(exc), table, key) from None

    return RunConfig(profile, link, sec, p_c_star, block_bits, pulses, seed, mode, box, source_path)


def _override_profile(profile: SourceProfile, src: dict, text: str) -> SourceProfile:
    shapes = {
        "theta": ("theta_avg", (3,)),
        "delta": ("delta", (3, 3)),
        "mu": ("mu", (2,)),
        "mu_cond": ("mu_cond", (2, 2)),
        "p_state": ("p_state", (3,)),
        "p_intensity": ("p_intensity", (2,)),
    }
    fields = {
        "theta_avg": profile.theta_avg,
        "delta": profile.delta,
        "mu": profile.mu,
        "mu_cond": profile.mu_cond,
        "p_c": profile.p_c,
        "p_state": profile.p_state,
        "p_intensity": profile.p_intensity,
    }
    if "mu" in src and "mu_cond" not in src:
        # keep the relative correlation pattern of the preset
        rel = profile.mu_cond / profile.mu[:, None]
        fields["mu_cond"] = rel * np.asarray(src["mu"], dtype=float)[:, None]
    for key, (name, shape) in shapes.items():
        if key in src:
            try:
                arr = np.asarray(src[key], dtype=float)
            except (ValueError, TypeError):
                raise _err(text, "must be numeric", "source", key) from None
            if arr.shape != shape:
                raise _err(text, f"expected shape {shape}, got {arr.shape}", "source", key)
            fields[name] = arr
    if "p_c" in src:
        fields["p_c"] = float(src["p_c"])
    try:
        return SourceProfile(**fields)
    except ValueError as exc:
        raise _err(text, str(exc), "source") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(p))


def bundled_config(name: str) -> Path:
    """Path of a shipped reference config (paper-101km, paper-151km, ideal-lossless)."""
    path = Path(__file__).parent / "data" / "configs" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
