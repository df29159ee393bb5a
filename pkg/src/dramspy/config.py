"""Model parameters, region-size parsing and seed fan-out.

Simulator parameters are read from an INI-style key-value file (see
``docs/config.md``).  All defaults are synthetic calibrations: they reproduce
the relative behaviour of retention-based DRAM decay (flip fractions of
1e-5..1e-3 at 40 °C, exponential growth with temperature, a handful of
indicator-cell candidates per °C in half a MiB), not absolute counts of any
particular module.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

KIB = 1024 * 8
MIB = 1024 * KIB

# temperature validity range of the decay model, °C
TEMP_MIN_C = -20.0
TEMP_MAX_C = 90.0


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of a simulated DRAM region.

    Retention times at ``ref_temp_c`` are log-normal: ``ln r ~ N(retention_log_mean,
    retention_log_sigma**2)`` seconds, multiplied by ``retention_scale`` (device to
    device variation).  A decay measurement of ``t`` seconds at ``T`` flips a charged
    cell iff ``t >= r * exp(-k_true * (T - ref_temp_c)) * jitter``.

    ``jitter`` is log-normal with unit mean.  Its log-sigma for a cell with
    reference retention ``r`` is ``noise_sigma * (noise_ref_s / r) ** noise_weak_exponent``,
    so weak (short-retention) cells are noisier.  ``noise_weak_exponent = 0`` gives a
    single global sigma.
    """

    ref_temp_c: float = 25.0
    k_true: float = 0.07
    retention_log_mean: float = 17.5
    retention_log_sigma: float = 3.5
    retention_scale: float = 1.0
    charged_fraction: float = 0.5
    noise_sigma: float = 0.004
    noise_weak_exponent: float = 0.5
    noise_ref_s: float = 300.0

    def validate(self) -> "ModelParams":
        finite = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name, value in finite.items():
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(name, f"must be a finite number, got {value!r}")
        if self.k_true <= 0:
            raise ConfigError("k_true", "must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma", "must be >= 0")
        if self.noise_weak_exponent < 0:
            raise ConfigError("noise_weak_exponent", "must be >= 0")
        if self.noise_ref_s <= 0:
            raise ConfigError("noise_ref_s", "must be > 0")
        if self.retention_log_sigma <= 0:
            raise ConfigError("retention_log_sigma", "must be > 0")
        if self.retention_scale <= 0:
            raise ConfigError("retention_scale", "must be > 0")
        if not 0.0 < self.charged_fraction <= 1.0:
            raise ConfigError("charged_fraction", "must be in (0, 1]")
        return self

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_mapping(cls, mapping) -> "ModelParams":
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(key, "unknown model parameter")
            try:
                values[key] = float(raw)
            except (TypeError, ValueError):
                raise ConfigError(key, f"not a number: {raw!r}") from None
        return cls(**values).validate()


_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([A-Za-z]*)\s*$")
_SIZE_UNITS = {
    "": 1,
    "bit": 1,
    "bits": 1,
    "b": 8,
    "kibit": 1024,
    "mibit": 1024 * 1024,
    "kib": KIB,
    "mib": MIB,
    "gib": 1024 * MIB,
}


def parse_size(text) -> int:
    """Parse a region size into bits.

    Bare numbers are bits.  ``KiB``/``MiB`` are bytes-based, ``KiBit``/``MiBit``
    bit-based, so ``"256KiBit" == "32KiB"``.
    """
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ConfigError("region_size", f"cannot parse size {text!r}")
    number, unit = m.groups()
    factor = _SIZE_UNITS.get(unit.lower())
    if factor is None:
        raise ConfigError("region_size", f"unknown size unit {unit!r}")
    bits = float(number) * factor
    if bits < 1 or bits != int(bits):
        raise ConfigError("region_size", f"size must be a positive whole number of bits: {text!r}")
    return int(bits)


def format_size(bits: int) -> str:
    for unit, factor in (("MiB", MIB), ("KiB", KIB), ("KiBit", 1024)):
        if bits % factor == 0:
            return f"{bits // factor}{unit}"
    return f"{bits}bit"


def derive_seed(master: int, *names) -> int:
    """Return a 64-bit seed for the named sub-stream of ``master``.

    Names may be strings or ints; the mapping is stable across runs and platforms.
    """
    key = tuple(n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names)
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_seeds(master: int, name, count: int) -> list[int]:
    return [derive_seed(master, name, i) for i in range(count)]


def read_config(path) -> configparser.ConfigParser:
    """Read an INI key-value config file; missing file is a ConfigError."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {p}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(p)
    return parser


def model_params_from_config(parser: configparser.ConfigParser, section: str = "model") -> ModelParams:
    if not parser.has_section(section):
        return ModelParams()
    return ModelParams.from_mapping(dict(parser.items(section)))
