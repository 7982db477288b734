"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored. Every key is
optional; missing keys take the defaults below, which reproduce the
smooth-truth experiment on the radius-14 disk. Unknown keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Parse or validation failure; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "exp1"
    # geometry
    radius: float = 14.0
    electrodes: int = 16
    width: float = 2.8
    contact_impedance: tuple[float, ...] = (0.005,)
    # field
    theta: float = 2.0
    dimension: int = 20
    amplitude: float = 5.0
    # truth and noise
    truth: str = "parametric"
    truth_seed: int = 1
    inclusion_center: tuple[float, ...] = (-4.0, -5.0)
    inclusion_radius: float = 3.0
    inclusion_contrast: float = 0.2
    noise_gamma: float = 0.014
    noise_seed: int = 2
    # meshes
    fine_h: float = 0.748
    coarse_h: float = 1.496
    # sampling
    method: str = "qmc"
    log2_n: int = 14
    levels: str = "10:14"
    shifts: int = 16
    shift_seed: int = 5
    vector: str = "embedded"
    grid: int = 128
    measurements: str = ""
    # cbc
    cbc_sigma: float = 1.0
    cbc_p: float = 0.5
    cbc_eps: float = 0.05
    cbc_beta_scale: float = 1.0

    @property
    def impedances(self) -> tuple[float, ...]:
        """Contact impedances per electrode (a single value is broadcast)."""
        z = self.contact_impedance
        return z * self.electrodes if len(z) == 1 else z

    @property
    def level_range(self) -> tuple[int, ...]:
        return parse_levels(self.levels)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_levels(text: str) -> tuple[int, ...]:
    """``"10:14"`` -> (10, ..., 14); ``"10,12"`` -> (10, 12)."""
    text = str(text).strip()
    if ":" in text:
        lo, hi = (int(v) for v in text.split(":"))
        return tuple(range(lo, hi + 1))
    return tuple(int(v) for v in text.split(","))


def _convert(name: str, raw: str):
    kind = _FIELDS[name].type
    if kind in ("float", float):
        return float(raw)
    if kind in ("int", int):
        return int(raw)
    if kind.startswith("tuple"):
        return tuple(float(v) for v in raw.split(","))
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    values, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        if key not in _FIELDS:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _convert(key, value)
        except ValueError:
            problems.append(f"{source}:{lineno}: cannot parse {key} = {value!r}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**values)


def parse_config(path: str | Path, require: tuple[str, ...] = ()) -> RunConfig:
    """Read and validate a config file; ``require`` names keys that must be set (e.g. measurements)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    cfg = parse_text(text, str(path))
    if cfg.measurements and not Path(cfg.measurements).is_absolute():
        cfg = replace(cfg, measurements=str((path.parent / cfg.measurements)))
    validate(cfg, require)
    return cfg


def validate(cfg: RunConfig, require: tuple[str, ...] = ()) -> RunConfig:
    """Check every parameter against its module's preconditions; report all failures at once."""
    p = []
    if not cfg.radius > 0:
        p.append(f"radius must be positive, got {cfg.radius}")
    if cfg.electrodes < 2:
        p.append(f"electrodes must be >= 2, got {cfg.electrodes}")
    if not cfg.width > 0:
        p.append(f"width must be positive, got {cfg.width}")
    elif cfg.radius > 0 and cfg.electrodes * cfg.width >= 2 * math.pi * cfg.radius:
        p.append(f"electrodes * width = {cfg.electrodes * cfg.width} exceeds the circumference")
    if len(cfg.contact_impedance) not in (1, cfg.electrodes):
        p.append(f"contact_impedance needs 1 or {cfg.electrodes} values")
    if any(not z > 0 for z in cfg.contact_impedance):
        p.append("contact_impedance must be positive (requires sigma_minus > 0)")
    if not cfg.theta > 1:
        p.append(f"theta must exceed 1, got {cfg.theta}")
    if cfg.dimension < 1:
        p.append(f"dimension must be >= 1, got {cfg.dimension}")
    if not cfg.amplitude > 0:
        p.append("amplitude must be positive")
    if cfg.truth not in ("parametric", "inclusion"):
        p.append(f"truth must be 'parametric' or 'inclusion', got {cfg.truth!r}")
    if len(cfg.inclusion_center) != 2:
        p.append("inclusion_center needs two coordinates")
    elif cfg.truth == "inclusion" and math.hypot(*cfg.inclusion_center) + cfg.inclusion_radius > cfg.radius:
        p.append("inclusion lies outside the domain")
    if not cfg.inclusion_radius > 0:
        p.append("inclusion_radius must be positive")
    if not cfg.inclusion_contrast > -1:
        p.append("inclusion_contrast must exceed -1")
    if not cfg.noise_gamma > 0:
        p.append(f"noise_gamma must be positive, got {cfg.noise_gamma}")
    if not cfg.fine_h > 0 or not cfg.coarse_h > 0:
        p.append("mesh widths must be positive")
    if cfg.method not in ("qmc", "mc", "both"):
        p.append(f"method must be qmc, mc or both, got {cfg.method!r}")
    if not 1 <= cfg.log2_n <= 20:
        p.append(f"log2_n must lie in [1, 20], got {cfg.log2_n}")
    try:
        lv = cfg.level_range
        if not lv or min(lv) < 1 or max(lv) > 20:
            p.append(f"levels must lie in [1, 20], got {cfg.levels!r}")
    except ValueError:
        p.append(f"cannot parse levels {cfg.levels!r}")
    if cfg.shifts < 1:
        p.append("shifts must be >= 1")
    if cfg.vector != "embedded" and not Path(cfg.vector).is_file():
        p.append(f"generating vector file {cfg.vector!r} does not exist")
    if cfg.grid < 1:
        p.append("grid must be >= 1")
    if cfg.measurements and not Path(cfg.measurements).is_file():
        p.append(f"measurements file {cfg.measurements!r} does not exist")
    if "measurements" in require and not cfg.measurements:
        p.append("measurements path is required for this command")
    if not cfg.cbc_sigma >= 1:
        p.append("cbc_sigma must be >= 1")
    if not 0 < cfg.cbc_p < 1:
        p.append("cbc_p must lie in (0, 1)")
    if not 0 < cfg.cbc_eps < 0.5:
        p.append("cbc_eps must lie in (0, 1/2)")
    if not cfg.cbc_beta_scale > 0:
        p.append("cbc_beta_scale must be positive")
    if p:
        raise ConfigError(p)
    return cfg


def write_config(cfg: RunConfig) -> str:
    """Config text listing every key; ``parse_text(write_config(c)) == c``."""
    return "".join(f"{name} = {_format(getattr(cfg, name))}\n" for name in _FIELDS)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every seed in the config."""
    return replace(cfg, truth_seed=seed, noise_seed=seed, shift_seed=seed)
