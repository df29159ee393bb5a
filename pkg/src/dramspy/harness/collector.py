"""Collector: turns incoming spy messages into temperature estimates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..inference import ApproxModel, IndicatorCellSet, approx_temperature, calibrate, decode_votes
from .agent import CALIBRATION_REGION
from .protocol import SpyMessage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CollectorConfig:
    model: ApproxModel | IndicatorCellSet
    calibration_temp_c: float | None = None


@dataclass(frozen=True)
class Estimate:
    timestamp_s: float
    flip_count: int
    inferred_c: float


class Collector:
    """Single-consumer state machine fed one message at a time."""

    def __init__(self, cfg: CollectorConfig):
        self.cfg = cfg
        self.model = cfg.model
        self.estimates: list[Estimate] = []
        self.gaps: list[tuple[str, int, int]] = []
        self.duplicates = 0
        self._last_seq: dict[str, int] = {}
        self._pending_ts: float | None = None
        self._pending: dict[int, int] = {}

    @property
    def indicator_mode(self) -> bool:
        return isinstance(self.model, IndicatorCellSet)

    def feed(self, msg: SpyMessage) -> None:
        last = self._last_seq.get(msg.device_id)
        if last is not None and msg.seq <= last:
            self.duplicates += 1
            log.warning("duplicate or reordered seq %d from %s ignored", msg.seq, msg.device_id)
            return
        expected = 0 if last is None else last + 1
        if msg.seq > expected and last is not None:
            self.gaps.append((msg.device_id, expected, msg.seq - 1))
            log.warning("missing seq %d..%d from %s", expected, msg.seq - 1, msg.device_id)
        self._last_seq[msg.device_id] = msg.seq

        if msg.region_id == CALIBRATION_REGION:
            self._calibrate(msg)
        elif self.indicator_mode:
            self._feed_step(msg)
        else:
            self.estimates.append(Estimate(msg.timestamp_s, msg.flip_count, approx_temperature(self.model, msg.flip_count)))

    def _calibrate(self, msg: SpyMessage) -> None:
        if self.indicator_mode:
            log.warning("calibration message ignored in indicator mode")
            return
        if self.cfg.calibration_temp_c is None:
            raise ValueError("calibration message received but no calibration temperature configured")
        self.model = calibrate(self.model, self.cfg.calibration_temp_c, msg.flip_count)
        log.info("calibrated p=%.6g from %d flips at %g °C", self.model.p, msg.flip_count, self.cfg.calibration_temp_c)

    def _feed_step(self, msg: SpyMessage) -> None:
        if not msg.region_id.startswith("s") or not msg.region_id[1:].isdigit():
            log.warning("unexpected region %r in indicator mode", msg.region_id)
            return
        if self._pending_ts is not None and msg.timestamp_s != self._pending_ts:
            self._flush()
        self._pending_ts = msg.timestamp_s
        self._pending[int(msg.region_id[1:])] = msg.flip_count

    def _flush(self) -> None:
        ind = self.model
        votes = np.array([self._pending.get(i, 0) * 2 > ind.l for i in range(1, len(ind.cells) + 1)])
        self.estimates.append(Estimate(self._pending_ts, int(sum(self._pending.values())), decode_votes(votes, ind.temps)))
        self._pending_ts = None
        self._pending = {}

    def finish(self) -> list[Estimate]:
        if self._pending_ts is not None:
            self._flush()
        return self.estimates
