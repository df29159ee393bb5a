"""Spy agent: measures decay on the attacked device and emits flip counts.

Time is virtual.  Cycle ``n`` starts at ``n * period``; refresh is disabled
after half of the I/O overhead (initialization) and re-enabled ``t``
seconds later, followed by the read-back.  A message is stamped with the
middle of its decay window; the matching ground truth is the mean
temperature over that window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..config import MIB, derive_seed
from ..countermeasures import KERNEL, CoverModel, DefensePolicy, Refused, guarded_decay_measure
from ..dram import CellArray
from ..inference import IndicatorCellSet
from .protocol import SpyMessage
from .scenario import Scenario

# affine I/O cost through two anchors: 8 s for 256 KiBit, 60 s for 2 MiB
_SMALL_BITS, _SMALL_S = 256 * 1024, 8.0
_LARGE_BITS, _LARGE_S = 2 * MIB, 60.0
IO_PER_BIT_S = (_LARGE_S - _SMALL_S) / (_LARGE_BITS - _SMALL_BITS)
IO_BASE_S = _SMALL_S - IO_PER_BIT_S * _SMALL_BITS

COUNT = "count"
INDICATOR = "indicator"
CALIBRATION_REGION = "cal"


def io_overhead_s(size_bits: int) -> float:
    """Initialization plus read-back time for a region of ``size_bits``."""
    return IO_BASE_S + IO_PER_BIT_S * size_bits


@dataclass(frozen=True)
class AgentConfig:
    decay_time_s: float = 120.0
    interval_s: float = 0.0
    device_id: str = "spy"
    region_id: str = "r0"
    seed: int = 0
    mode: str = COUNT
    indicators: IndicatorCellSet | None = None
    calibration_temp_c: float | None = None
    io_overhead_s: float | None = None
    cover: CoverModel | None = None
    policy: DefensePolicy = DefensePolicy()
    pathway: str = KERNEL
    max_retries: int = 5
    backoff_s: float = 0.05

    def __post_init__(self):
        if not self.decay_time_s > 0:
            raise ValueError("decay_time_s must be > 0")
        if self.mode not in (COUNT, INDICATOR):
            raise ValueError(f"unknown agent mode {self.mode!r}")
        if self.mode == INDICATOR and self.indicators is None:
            raise ValueError("indicator mode needs an indicator cell set")

    def overhead_for(self, size_bits: int) -> float:
        return io_overhead_s(size_bits) if self.io_overhead_s is None else self.io_overhead_s

    def period_for(self, size_bits: int) -> float:
        return max(self.interval_s, self.decay_time_s + self.overhead_for(size_bits))


@dataclass(frozen=True)
class Truth:
    timestamp_s: float
    ambient_c: float
    device_c: float


class SpyAgent:
    """Generates the message stream for one device in one scenario."""

    def __init__(self, array: CellArray, scenario: Scenario, cfg: AgentConfig):
        self.array = array
        self.scenario = scenario
        self.cfg = cfg
        self.seq = 0
        self.refused: Refused | None = None

    def _message(self, ts: float, region: str, flips: int) -> SpyMessage:
        msg = SpyMessage(self.seq, ts, self.cfg.device_id, region, int(round(self.cfg.decay_time_s * 1000)), int(flips))
        self.seq += 1
        return msg

    def _measure(self, temp_c: float, seed: int):
        out = guarded_decay_measure(self.cfg.policy, self.array, temp_c, self.cfg.decay_time_s, seed, self.cfg.pathway)
        if isinstance(out, Refused):
            self.refused = out
            return None
        return out

    def messages(self) -> Iterator[tuple[SpyMessage, Truth | None]]:
        cfg, arr, sc = self.cfg, self.array, self.scenario
        k, ref = arr.params.k_true, arr.params.ref_temp_c
        if cfg.calibration_temp_c is not None:
            temp = cfg.calibration_temp_c if cfg.cover is None else float(cfg.cover(cfg.calibration_temp_c))
            bm = self._measure(temp, derive_seed(cfg.seed, "calibration"))
            if bm is None:
                return
            yield self._message(0.0, CALIBRATION_REGION, len(bm)), None
        io_s = cfg.overhead_for(arr.size_bits)
        period = cfg.period_for(arr.size_bits)
        n = 0
        while n * period + io_s + cfg.decay_time_s <= sc.duration_s + 1e-9:
            start = n * period + io_s / 2
            mid = start + cfg.decay_time_s / 2
            temp = sc.equivalent_temperature(start, cfg.decay_time_s, k, ref, cfg.cover)
            bm = self._measure(temp, derive_seed(cfg.seed, "measure", n))
            if bm is None:
                return
            truth = Truth(mid, *sc.window_mean(start, cfg.decay_time_s))
            if cfg.mode == COUNT:
                yield self._message(mid, cfg.region_id, len(bm)), truth
            else:
                for i, cells in enumerate(cfg.indicators.cells, start=1):
                    flips = int(np.count_nonzero(bm.contains_many(cells)))
                    yield self._message(mid, f"s{i}", flips), truth if i == 1 else None
            n += 1
