"""Temperature inference from decay measurements.

Two decoders live here:

* indicator cells: for every enrollment step a handful of cells that flip at
  the upper temperature but not the lower one; a majority vote per step tells
  whether the current temperature has reached it.
* the approximation function ``T = c1 * exp(c2 * bf * p)``, fitted piecewise
  on flip counts and carried to other devices of the same model through the
  count ratio ``p`` at one known temperature.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dram import DecayBitmap
from .enrollment import REAL, EnrollmentTable, candidate_cells
from .errors import DegenerateCalibrationError, InsufficientCandidatesError, InsufficientDataError

INDICATOR_FORMAT = "dramspy.indicator-cells"
MODEL_FORMAT = "dramspy.approx-model"
FORMAT_VERSION = 1

# three coarse regions; fine segmentation (see ``grid_bounds``) fits better
DEFAULT_SEGMENT_BOUNDS = (0.0, 25.0, 45.0, 70.0)
MIN_FIT_TEMP_C = 0.5


class VoteConsistencyWarning(UserWarning):
    """A higher step voted 'above' while a lower one did not."""


@dataclass(frozen=True, eq=False)
class IndicatorCellSet:
    temps: tuple[float, ...]
    cells: tuple[np.ndarray, ...]
    l: int
    decay_time_s: float
    region_size_bits: int

    def __post_init__(self):
        object.__setattr__(self, "temps", tuple(float(t) for t in self.temps))
        cells = tuple(np.array(c, dtype=np.int64) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        if self.l < 3 or self.l % 2 == 0:
            raise ValueError(f"l must be odd and >= 3, got {self.l}")
        if len(cells) != len(self.temps) - 1:
            raise ValueError("need one cell list per adjacent temperature pair")
        for c in cells:
            if c.size != self.l:
                raise ValueError(f"every step needs exactly l={self.l} cells")
            if c.size and (c.min() < 0 or c.max() >= self.region_size_bits):
                raise ValueError("indicator cell outside region")

    @property
    def n_cells(self) -> int:
        return self.l * len(self.cells)

    def all_cells(self) -> np.ndarray:
        return np.concatenate(self.cells) if self.cells else np.empty(0, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "format": INDICATOR_FORMAT,
            "version": FORMAT_VERSION,
            "l": self.l,
            "decay_time_s": self.decay_time_s,
            "region_size_bits": self.region_size_bits,
            "temps": list(self.temps),
            "cells": [c.tolist() for c in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "IndicatorCellSet":
        if doc.get("format") != INDICATOR_FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 indicator cell document")
        return cls(tuple(doc["temps"]), tuple(doc["cells"]), int(doc["l"]), float(doc["decay_time_s"]), int(doc["region_size_bits"]))

    @classmethod
    def from_json(cls, text: str) -> "IndicatorCellSet":
        return cls.from_dict(json.loads(text))


def select_indicator_cells(table: EnrollmentTable, l: int) -> IndicatorCellSet:
    """Choose ``l`` indicator cells for every adjacent pair of enrollment temperatures.

    Candidates come from the first measurement of each record.  When repeated
    measurements exist, candidates that behave as indicators in more of them
    are preferred; remaining ties go to the lowest cell index.
    """
    if l < 3 or l % 2 == 0:
        raise ValueError(f"l must be odd and >= 3, got {l}")
    if not table.has_bitmaps:
        raise ValueError("indicator selection needs an enrollment table with bitmaps")
    recs = table.records
    chosen = []
    for i in range(1, len(recs)):
        lo, hi = recs[i - 1], recs[i]
        cand = candidate_cells(lo.bitmap, hi.bitmap)
        if cand.size < l:
            raise InsufficientCandidatesError(i, lo.nominal_temp_c, hi.nominal_temp_c, int(cand.size), l)
        score = np.zeros(cand.size, dtype=np.int64)
        for blo, bhi in zip(lo.bitmaps, hi.bitmaps):
            score += bhi.contains_many(cand) & ~blo.contains_many(cand)
        order = np.lexsort((cand, -score))
        chosen.append(np.sort(cand[order[:l]]))
    return IndicatorCellSet(tuple(table.temps), tuple(chosen), l, table.base_decay_time_s, table.region_size_bits)


def majority_vote(bitmap: DecayBitmap, cells) -> bool:
    cells = np.asarray(cells, dtype=np.int64)
    return int(bitmap.contains_many(cells).sum()) * 2 > cells.size


def vote_pattern(bitmap: DecayBitmap, ind: IndicatorCellSet) -> np.ndarray:
    """Vote of every step; entry ``i`` says "temperature has reached ``temps[i + 1]``"."""
    if bitmap.region_size_bits != ind.region_size_bits:
        raise ValueError("bitmap and indicator set describe different regions")
    return np.array([majority_vote(bitmap, c) for c in ind.cells], dtype=bool)


def decode_votes(votes: Sequence[bool], temps: Sequence[float]) -> float:
    votes = np.asarray(votes, dtype=bool)
    passing = np.flatnonzero(votes)
    if passing.size == 0:
        return float(temps[0])
    top = int(passing[-1])
    if not votes[: top + 1].all():
        warnings.warn(
            f"non-monotone vote pattern {votes.astype(int).tolist()}; using highest passing step",
            VoteConsistencyWarning,
            stacklevel=3,
        )
    return float(temps[top + 1])


def decode_temperature(bitmap: DecayBitmap, ind: IndicatorCellSet) -> float:
    """Enrollment temperature of the highest step whose majority vote passes."""
    return decode_votes(vote_pattern(bitmap, ind), ind.temps)


# -- approximation function ---------------------------------------------------


@dataclass(frozen=True)
class Segment:
    t_lo: float
    t_hi: float
    c1: float
    c2: float

    def __call__(self, x: float) -> float:
        return self.c1 * math.exp(self.c2 * x)

    def inverse(self, temp_c: float) -> float:
        """Scaled flip count at which this segment predicts ``temp_c``."""
        return math.log(temp_c / self.c1) / self.c2


@dataclass(frozen=True)
class ApproxModel:
    segments: tuple[Segment, ...]
    k: float | None = None
    p: float = 1.0
    decay_time_s: float = 0.0
    enroll_device_id: str = "enroll"
    region_size_bits: int = 0
    points: tuple[tuple[float, float], ...] = field(default=(), compare=False)

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("model needs at least one segment")
        for a, b in zip(segs, segs[1:]):
            if a.t_hi != b.t_lo:
                raise ValueError(f"segments must be contiguous: {a.t_hi} != {b.t_lo}")
        for s in segs:
            if not s.c1 > 0:
                raise ValueError("c1 must be positive")
        if not self.p > 0:
            raise ValueError("p must be positive")

    @property
    def t_min(self) -> float:
        return self.segments[0].t_lo

    @property
    def t_max(self) -> float:
        return self.segments[-1].t_hi

    @property
    def monotone(self) -> bool:
        """True when every segment grows with the flip count."""
        return all(s.c2 > 0 for s in self.segments)

    def with_p(self, p: float) -> "ApproxModel":
        return replace(self, p=float(p))

    def enrolled_count(self, temp_c: float) -> float | None:
        for t, bf in self.points:
            if abs(t - temp_c) < 1e-9:
                return bf
        return None

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": FORMAT_VERSION,
            "segments": [[s.t_lo, s.t_hi, s.c1, s.c2] for s in self.segments],
            "k": self.k,
            "p": self.p,
            "decay_time_s": self.decay_time_s,
            "enroll_device_id": self.enroll_device_id,
            "region_size_bits": self.region_size_bits,
            "points": [list(pt) for pt in self.points],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ApproxModel":
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 approximation model document")
        return cls(
            tuple(Segment(*map(float, s)) for s in doc["segments"]),
            doc.get("k"),
            float(doc["p"]),
            float(doc["decay_time_s"]),
            doc.get("enroll_device_id", "enroll"),
            int(doc.get("region_size_bits", 0)),
            tuple((float(t), float(b)) for t, b in doc.get("points", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "ApproxModel":
        return cls.from_dict(json.loads(text))


def grid_bounds(t_lo: float, t_hi: float, step: float, min_temp_c: float = MIN_FIT_TEMP_C) -> list[float]:
    """Segment bounds every ``step`` degrees.

    The first segment is widened when it would hold fewer than two usable
    temperatures (temperatures at or below ``min_temp_c`` are not fitted).
    """
    n = int(round((t_hi - t_lo) / step))
    bounds = [t_lo + i * step for i in range(n + 1)]
    if t_lo <= min_temp_c and len(bounds) > 2:
        del bounds[1]
    return bounds


def fit_segments(temps, counts, segment_bounds: Sequence[float]) -> tuple[Segment, ...]:
    """Least-squares ``ln T = ln c1 + c2 * bf`` inside every segment.

    Points are assigned to every segment whose closed interval contains
    their temperature, so neighbouring segments share boundary points.
    """
    bounds = [float(b) for b in segment_bounds]
    if len(bounds) < 2 or any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ValueError("segment bounds must be strictly increasing")
    temps = np.asarray(temps, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if bounds[0] < temps.min() - 1e-9 or bounds[-1] > temps.max() + 1e-9:
        raise ValueError(f"segment bounds {bounds[0]}..{bounds[-1]} exceed enrolled range {temps.min()}..{temps.max()}")
    segments = []
    for lo, hi in zip(bounds, bounds[1:]):
        m = (temps >= lo - 1e-9) & (temps <= hi + 1e-9) & (temps > MIN_FIT_TEMP_C)
        x, y = counts[m], np.log(temps[m])
        if x.size < 2 or np.ptp(x) == 0:
            raise InsufficientDataError(f"segment {lo:g}..{hi:g} °C has fewer than 2 usable records")
        design = np.column_stack([np.ones_like(x), x])
        (ln_c1, c2), *_ = np.linalg.lstsq(design, y, rcond=None)
        segments.append(Segment(lo, hi, math.exp(ln_c1), float(c2)))
    return tuple(segments)


def fit_approx_model(
    table: EnrollmentTable,
    segment_bounds: Sequence[float] = DEFAULT_SEGMENT_BOUNDS,
    *,
    device_id: str = "enroll",
    k: float | None = None,
) -> ApproxModel:
    """Fit the approximation function on a real-temperature table (p = 1).

    Mean counts are used when a record holds repeated measurements or
    pooled boards.
    """
    if table.mode != REAL:
        raise ValueError("approximation models are fitted on real-temperature tables")
    temps, counts = table.temps, table.mean_counts
    model = ApproxModel(
        fit_segments(temps, counts, segment_bounds),
        k if k is not None else table.k_used,
        1.0,
        table.base_decay_time_s,
        device_id,
        table.region_size_bits,
        tuple((float(t), float(c)) for t, c in zip(temps, counts)),
    )
    if not model.monotone:
        warnings.warn("fitted model has a segment with c2 <= 0; inference is not monotone", RuntimeWarning, stacklevel=2)
    return model


def compute_p(bf_enr_at_known: float, bf_obs_at_known: float) -> float:
    """Ratio of enrollment-device to observed-device flips at one known temperature."""
    if bf_obs_at_known <= 0:
        raise DegenerateCalibrationError("observed flip count is zero; the known temperature is too cold to calibrate")
    if bf_enr_at_known <= 0:
        raise DegenerateCalibrationError("enrollment flip count at the known temperature is zero")
    return bf_enr_at_known / bf_obs_at_known


def expected_flips(model: ApproxModel, temp_c: float) -> float:
    """Flip count the enrollment device would show at ``temp_c``.

    Uses the enrolled count when ``temp_c`` is an enrollment temperature,
    otherwise inverts the segment that covers it.
    """
    enrolled = model.enrolled_count(temp_c)
    if enrolled is not None:
        return enrolled
    for seg in model.segments:
        if seg.t_lo <= temp_c <= seg.t_hi:
            return seg.inverse(temp_c)
    raise ValueError(f"{temp_c} °C is outside the model range {model.t_min}..{model.t_max}")


def calibrate(model: ApproxModel, known_temp_c: float, observed_count) -> ApproxModel:
    """Return ``model`` carrying ``p`` for a device observed at a known temperature."""
    observed = float(np.mean(observed_count)) if np.ndim(observed_count) else float(observed_count)
    return model.with_p(compute_p(expected_flips(model, known_temp_c), observed))


def approx_temperature(model: ApproxModel, bf) -> float:
    """Temperature for a flip count (or the mean of several counts).

    Every segment is evaluated; the first whose output lands inside its own
    bounds wins, otherwise the one closest to its bounds.  The result is
    clamped to the model's range.
    """
    count = float(np.mean(bf)) if np.ndim(bf) else float(bf)
    if count < 0:
        raise ValueError("flip count must be >= 0")
    x = count * model.p
    best, best_gap = None, math.inf
    for seg in model.segments:
        try:
            t = seg(x)
        except OverflowError:
            t = math.inf
        gap = max(seg.t_lo - t, t - seg.t_hi, 0.0)
        if gap == 0.0:
            best = t
            break
        if best is None or gap < best_gap:
            best, best_gap = t, gap
    return min(max(best, model.t_min), model.t_max)
