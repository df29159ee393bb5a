"""Defenses: refresh lockdown, zero-on-wake and a thermal cover box.

The cover is modeled as an affine distortion of the temperature the DRAM
actually sees.  An attacker whose model was fitted without the cover reads
the distorted temperature and is off by the offset plus a slope error.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .config import derive_seed
from .dram import CellArray, DecayBitmap, decay_measure
from .errors import ConfigError

KERNEL = "kernel"
SLEEP = "sleep"
PATHWAYS = (KERNEL, SLEEP)


@dataclass(frozen=True)
class CoverModel:
    offset_c: float = 2.0
    slope_gain: float = 1.15
    ref_temp_c: float = 25.0
    self_heat_c: float = 1.0

    def __post_init__(self):
        if not self.slope_gain > 0:
            raise ConfigError("slope_gain", "must be > 0")

    @classmethod
    def identity(cls) -> "CoverModel":
        return cls(0.0, 1.0, 25.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.offset_c == 0 and self.slope_gain == 1 and self.self_heat_c == 0

    def __call__(self, ambient_c):
        return effective_temperature(self, ambient_c)


def effective_temperature(cover: CoverModel, ambient_c):
    """Temperature inside the cover for a given outside temperature."""
    return ambient_c + cover.offset_c + cover.self_heat_c + (cover.slope_gain - 1.0) * (ambient_c - cover.ref_temp_c)


@dataclass(frozen=True)
class DefensePolicy:
    refresh_locked: bool = False
    zero_on_wake: bool = False


@dataclass(frozen=True)
class Refused:
    """The platform refused to disable refresh; no measurement was taken."""

    reason: str


def guarded_decay_measure(
    policy: DefensePolicy,
    array: CellArray,
    temp_c: float,
    decay_time_s: float,
    seed: int = 0,
    pathway: str = KERNEL,
) -> DecayBitmap | Refused:
    """A decay measurement as it would go through a defended platform.

    ``kernel`` disables refresh through the memory controller; ``sleep``
    relies on the memory losing refresh while the system sleeps.  A locked
    refresh blocks both; zeroing on wake erases the decay pattern of the
    sleep pathway before it can be read.
    """
    if pathway not in PATHWAYS:
        raise ValueError(f"unknown pathway {pathway!r}")
    if policy.refresh_locked:
        return Refused("refresh control is locked by the kernel/firmware")
    bitmap = decay_measure(array, temp_c, decay_time_s, seed)
    if pathway == SLEEP and policy.zero_on_wake:
        return DecayBitmap.empty(array.size_bits, temp_c=bitmap.temp_c, decay_time_s=bitmap.decay_time_s, measurement_seed=seed)
    return bitmap


@dataclass(frozen=True)
class DefenseReport:
    bare_mean_c: float
    bare_p95_c: float
    covered_mean_c: float
    covered_p95_c: float
    rows: int

    @property
    def mean_degradation_c(self) -> float:
        return self.covered_mean_c - self.bare_mean_c

    @property
    def p95_degradation_c(self) -> float:
        return self.covered_p95_c - self.bare_p95_c

    def to_csv(self, comments: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (comments or {}).items():
            buf.write(f"# {key}={value}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "rows", "mean_abs_error_c", "p95_abs_error_c"])
        w.writerow(["bare", self.rows, f"{self.bare_mean_c:.4f}", f"{self.bare_p95_c:.4f}"])
        w.writerow(["covered", self.rows, f"{self.covered_mean_c:.4f}", f"{self.covered_p95_c:.4f}"])
        return buf.getvalue()

    def summary(self) -> str:
        return (
            f"bare: mean {self.bare_mean_c:.2f} °C, p95 {self.bare_p95_c:.2f} °C\n"
            f"covered (attacker unaware): mean {self.covered_mean_c:.2f} °C, p95 {self.covered_p95_c:.2f} °C\n"
            f"degradation: mean +{self.mean_degradation_c:.2f} °C, p95 +{self.p95_degradation_c:.2f} °C\n"
        )


def evaluate_defense(scenario, cover: CoverModel, model, array: CellArray, agent_cfg=None, collector_cfg=None, t_range=None) -> DefenseReport:
    """Run ``scenario`` bare and under ``cover`` with the same seeds and compare errors.

    ``model`` must have been fitted without the cover; the collector is not
    told about it.  ``t_range`` restricts the statistics to rows whose true
    device temperature lies inside it.
    """
    from dataclasses import replace

    from .harness.run import AgentConfig, CollectorConfig, run_scenario

    agent_cfg = agent_cfg or AgentConfig(decay_time_s=model.decay_time_s, seed=derive_seed(0, "defense"))
    collector_cfg = collector_cfg or CollectorConfig(model)
    bare = run_scenario(array, scenario, replace(agent_cfg, cover=None), collector_cfg)
    covered = run_scenario(array, scenario, replace(agent_cfg, cover=cover), collector_cfg)
    if t_range is not None:
        bare, covered = bare.in_range(*t_range), covered.in_range(*t_range)
    if len(bare) == 0:
        raise ValueError("no trace rows to compare")
    eb, ec = bare.abs_error_c, covered.abs_error_c
    return DefenseReport(
        float(eb.mean()), float(np.percentile(eb, 95)), float(ec.mean()), float(np.percentile(ec, 95)), len(bare)
    )
