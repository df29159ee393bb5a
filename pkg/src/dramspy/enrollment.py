"""Enrollment tables, temperature-index estimation and validation metrics.

Three table flavours exist:

* ``real``: one decay time, several ambient temperatures.
* ``simulated``: one ambient temperature, decay times stretched by
  ``exp(k * (T_i - T_at))`` so record ``i`` stands in for temperature ``T_i``.
* ``sweep``: one ambient temperature, arbitrary decay times; the raw material
  for estimating ``k`` when it is not known yet.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import derive_seed
from .dram import CellArray, DecayBitmap, _check_same_region, decay_measure
from .errors import DecayTimeRangeError, InsufficientDataError, UndefinedBERError

REAL = "real-temperature"
SIMULATED = "simulated-by-decay-time"
SWEEP = "decay-sweep"
MODES = (REAL, SIMULATED, SWEEP)

TABLE_FORMAT = "dramspy.enrollment-table"
TABLE_VERSION = 1
MAX_DECAY_S = 3600.0


@dataclass(frozen=True, eq=False)
class EnrollmentRecord:
    """One enrollment condition.

    ``flip_count`` belongs to the first measurement; ``repeat_counts`` to any
    further measurements under the same condition.  Bitmaps are optional.
    """

    nominal_temp_c: float
    decay_time_s: float
    flip_count: int
    bitmap: DecayBitmap | None = None
    repeat_bitmaps: tuple[DecayBitmap, ...] = ()
    repeat_counts: tuple[int, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.nominal_temp_c):
            raise ValueError("nominal_temp_c must be finite")
        if self.bitmap is not None and len(self.bitmap) != self.flip_count:
            raise ValueError("flip_count does not match bitmap")
        if self.repeat_bitmaps and not self.repeat_counts:
            object.__setattr__(self, "repeat_counts", tuple(len(b) for b in self.repeat_bitmaps))
        if self.repeat_bitmaps and tuple(len(b) for b in self.repeat_bitmaps) != tuple(self.repeat_counts):
            raise ValueError("repeat_counts do not match repeat_bitmaps")

    @property
    def all_counts(self) -> tuple[int, ...]:
        return (self.flip_count, *self.repeat_counts)

    @property
    def mean_flip_count(self) -> float:
        return float(np.mean(self.all_counts))

    @property
    def bitmaps(self) -> tuple[DecayBitmap, ...]:
        if self.bitmap is None:
            return ()
        return (self.bitmap, *self.repeat_bitmaps)

    def without_bitmaps(self) -> "EnrollmentRecord":
        return EnrollmentRecord(self.nominal_temp_c, self.decay_time_s, self.flip_count, None, (), self.repeat_counts)


@dataclass(frozen=True, eq=False)
class EnrollmentTable:
    records: tuple[EnrollmentRecord, ...]
    base_decay_time_s: float
    mode: str = REAL
    k_used: float | None = None
    measured_at_c: float | None = None
    region_size_bits: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.mode not in MODES:
            raise ValueError(f"unknown table mode {self.mode!r}")
        if self.mode == SWEEP:
            times = [r.decay_time_s for r in self.records]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("sweep decay times must be strictly increasing")
        else:
            temps = [r.nominal_temp_c for r in self.records]
            if any(b <= a for a, b in zip(temps, temps[1:])):
                raise ValueError("enrollment temperatures must be strictly increasing")
        if self.mode == SIMULATED:
            if self.k_used is None or self.measured_at_c is None:
                raise ValueError("simulated tables need k_used and measured_at_c")
            for r in self.records:
                want = self.base_decay_time_s * math.exp(self.k_used * (r.nominal_temp_c - self.measured_at_c))
                if abs(r.decay_time_s - want) > 1.0:
                    raise ValueError(f"record at {r.nominal_temp_c} °C has decay time {r.decay_time_s}, expected {want}")

    def __len__(self):
        return len(self.records)

    @property
    def temps(self) -> list[float]:
        return [r.nominal_temp_c for r in self.records]

    @property
    def counts(self) -> list[int]:
        return [r.flip_count for r in self.records]

    @property
    def mean_counts(self) -> list[float]:
        return [r.mean_flip_count for r in self.records]

    @property
    def has_bitmaps(self) -> bool:
        return bool(self.records) and all(r.bitmap is not None for r in self.records)

    def record_at(self, temp_c: float) -> EnrollmentRecord | None:
        for r in self.records:
            if abs(r.nominal_temp_c - temp_c) < 1e-9:
                return r
        return None

    def without_bitmaps(self) -> "EnrollmentTable":
        return EnrollmentTable(
            tuple(r.without_bitmaps() for r in self.records),
            self.base_decay_time_s,
            self.mode,
            self.k_used,
            self.measured_at_c,
            self.region_size_bits,
            dict(self.meta),
        )

    # -- serialization -------------------------------------------------

    def to_dict(self, include_bitmaps: bool = True) -> dict:
        recs = []
        for r in self.records:
            d = {
                "nominal_temp_c": r.nominal_temp_c,
                "decay_time_s": r.decay_time_s,
                "flip_count": r.flip_count,
                "repeat_counts": list(r.repeat_counts),
            }
            if include_bitmaps and r.bitmap is not None:
                d["bitmaps"] = [[b.measurement_seed, b.flipped.tolist()] for b in r.bitmaps]
            recs.append(d)
        return {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "mode": self.mode,
            "base_decay_time_s": self.base_decay_time_s,
            "k_used": self.k_used,
            "measured_at_c": self.measured_at_c,
            "region_size_bits": self.region_size_bits,
            "meta": self.meta,
            "records": recs,
        }

    def to_json(self, include_bitmaps: bool = True) -> str:
        return json.dumps(self.to_dict(include_bitmaps), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EnrollmentTable":
        if doc.get("format") != TABLE_FORMAT:
            raise ValueError(f"not an enrollment table document: format={doc.get('format')!r}")
        if doc.get("version") != TABLE_VERSION:
            raise ValueError(f"unsupported enrollment table version {doc.get('version')!r}")
        size = int(doc["region_size_bits"])
        mode = doc["mode"]
        at = doc.get("measured_at_c")
        records = []
        for d in doc["records"]:
            temp = at if mode != REAL and at is not None else d["nominal_temp_c"]
            bms = [
                DecayBitmap(np.array(idx, dtype=np.int64), size, temp_c=temp, decay_time_s=d["decay_time_s"], measurement_seed=s)
                for s, idx in d.get("bitmaps", [])
            ]
            records.append(
                EnrollmentRecord(
                    d["nominal_temp_c"],
                    d["decay_time_s"],
                    d["flip_count"],
                    bms[0] if bms else None,
                    tuple(bms[1:]),
                    tuple(d.get("repeat_counts", ())),
                )
            )
        return cls(tuple(records), doc["base_decay_time_s"], mode, doc.get("k_used"), at, size, doc.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "EnrollmentTable":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["nominal_temp_c", "decay_time_s", "flip_count", "mean_flip_count"])
        for r in self.records:
            w.writerow([f"{r.nominal_temp_c:g}", f"{r.decay_time_s:.6g}", r.flip_count, f"{r.mean_flip_count:.6g}"])
        return buf.getvalue()


def _measure_record(array, nominal, measure_temp, decay_time, seed, repeats, keep_bitmaps) -> EnrollmentRecord:
    bms = [decay_measure(array, measure_temp, decay_time, seed if r == 0 else derive_seed(seed, "repeat", r)) for r in range(repeats)]
    counts = tuple(len(b) for b in bms)
    if keep_bitmaps:
        return EnrollmentRecord(nominal, decay_time, counts[0], bms[0], tuple(bms[1:]), counts[1:])
    return EnrollmentRecord(nominal, decay_time, counts[0], None, (), counts[1:])


def _check_seeds(seeds, n):
    seeds = list(seeds)
    if len(seeds) != n:
        raise ValueError(f"need {n} measurement seeds, got {len(seeds)}")
    return seeds


def enroll_real(
    array: CellArray,
    temps: Sequence[float],
    decay_time_s: float,
    seeds: Sequence[int],
    *,
    repeats: int = 1,
    keep_bitmaps: bool = True,
) -> EnrollmentTable:
    """Measure at each temperature with a fixed decay time."""
    temps = [float(t) for t in temps]
    if len(temps) < 2:
        raise ValueError("enrollment needs at least 2 temperatures")
    if any(b <= a for a, b in zip(temps, temps[1:])):
        raise ValueError("enrollment temperatures must be strictly increasing")
    seeds = _check_seeds(seeds, len(temps))
    records = tuple(_measure_record(array, T, T, decay_time_s, s, repeats, keep_bitmaps) for T, s in zip(temps, seeds))
    return EnrollmentTable(records, float(decay_time_s), REAL, region_size_bits=array.size_bits)


def simulated_decay_time(t_real_s: float, delta_t_c: float, k: float) -> float:
    """Decay time that reproduces a measurement ``delta_t_c`` degrees warmer."""
    return t_real_s * math.exp(k * delta_t_c)


def enroll_constant_temp(
    array: CellArray,
    t0_s: float,
    target_temps: Sequence[float],
    at_temp_c: float,
    k: float,
    seeds: Sequence[int],
    *,
    max_decay_s: float = MAX_DECAY_S,
    repeats: int = 1,
    keep_bitmaps: bool = True,
) -> EnrollmentTable:
    """Stand in for a multi-temperature enrollment using decay times only.

    The record for target ``T_i`` is measured at ``at_temp_c`` for
    ``t0_s * exp(k * (T_i - at_temp_c))`` seconds.
    """
    if k <= 0:
        raise ValueError("k must be > 0")
    if t0_s <= 0:
        raise ValueError("t0_s must be > 0")
    targets = [float(t) for t in target_temps]
    if len(targets) < 2 or any(b <= a for a, b in zip(targets, targets[1:])):
        raise ValueError("target temperatures must be strictly increasing with at least 2 entries")
    seeds = _check_seeds(seeds, len(targets))
    times = [simulated_decay_time(t0_s, T - at_temp_c, k) for T in targets]
    too_long = [t for t in times if t > max_decay_s]
    if too_long:
        raise DecayTimeRangeError(f"simulated decay time {max(too_long):.1f} s exceeds the {max_decay_s:g} s limit")
    records = tuple(
        _measure_record(array, T, at_temp_c, t, s, repeats, keep_bitmaps) for T, t, s in zip(targets, times, seeds)
    )
    return EnrollmentTable(records, float(t0_s), SIMULATED, float(k), float(at_temp_c), array.size_bits)


def enroll_decay_sweep(
    array: CellArray,
    at_temp_c: float,
    decay_times: Sequence[float],
    seeds: Sequence[int],
    *,
    t_real_s: float | None = None,
    repeats: int = 1,
    keep_bitmaps: bool = False,
) -> EnrollmentTable:
    """Measure several decay times at one temperature (input to :func:`estimate_k`).

    ``t_real_s`` is the decay time the sweep is meant to emulate; it is stored
    as the table's base decay time.
    """
    times = [float(t) for t in decay_times]
    seeds = _check_seeds(seeds, len(times))
    records = tuple(
        _measure_record(array, at_temp_c, at_temp_c, t, s, repeats, keep_bitmaps) for t, s in zip(times, seeds)
    )
    base = float(t_real_s) if t_real_s is not None else times[0]
    return EnrollmentTable(records, base, SWEEP, None, float(at_temp_c), array.size_bits)


def match_pairs(sim_table: EnrollmentTable, real_table: EnrollmentTable) -> list[tuple[float, float]]:
    """Pair every simulation record with the real record of closest flip count.

    Returns ``(delta_T, ln(t_sim / t_real))`` tuples.  Ties go to the lower
    temperature.  Simulation counts outside the real table's count range have
    no meaningful partner and are skipped.
    """
    if not sim_table.records or not real_table.records:
        raise InsufficientDataError("both tables must be non-empty")
    if sim_table.measured_at_c is None:
        raise ValueError("simulation table does not record its measurement temperature")
    if real_table.mode != REAL:
        raise ValueError("real_table must be a real-temperature table")
    t_real = real_table.base_decay_time_s
    real_counts = np.array(real_table.mean_counts)
    real_temps = np.array(real_table.temps)
    lo, hi = real_counts.min(), real_counts.max()
    pairs = []
    for rec in sim_table.records:
        c = rec.mean_flip_count
        if c < lo or c > hi:
            continue
        dist = np.abs(real_counts - c)
        # temperatures ascend, so argmin picks the lower temperature on ties
        j = int(np.argmin(dist))
        pairs.append((float(real_temps[j] - sim_table.measured_at_c), math.log(rec.decay_time_s / t_real)))
    return pairs


def fit_k(pairs: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope through the origin of ``ln(t_sim/t_real)`` on ``delta_T``."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise InsufficientDataError(f"need at least 3 matched pairs to estimate k, got {len(pairs)}")
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    sxx = float(x @ x)
    if sxx == 0:
        raise InsufficientDataError("all matched pairs have zero temperature difference")
    return float(x @ y) / sxx


def estimate_k(sim_table: EnrollmentTable, real_table: EnrollmentTable) -> float:
    return fit_k(match_pairs(sim_table, real_table))


def estimate_k_pooled(table_pairs: Iterable[tuple[EnrollmentTable, EnrollmentTable]]) -> float:
    """Estimate ``k`` from several (simulation, real) table pairs at once."""
    pairs = []
    for sim, real in table_pairs:
        pairs.extend(match_pairs(sim, real))
    return fit_k(pairs)


def jaccard(a: DecayBitmap, b: DecayBitmap) -> float:
    _check_same_region(a, b)
    union = np.union1d(a.flipped, b.flipped).size
    if union == 0:
        return 1.0
    return np.intersect1d(a.flipped, b.flipped, assume_unique=True).size / union


def candidate_cells(lo: DecayBitmap, hi: DecayBitmap) -> np.ndarray:
    """Cells flipped in ``hi`` but not in ``lo``."""
    _check_same_region(lo, hi)
    return np.setdiff1d(hi.flipped, lo.flipped, assume_unique=True)


def indicator_errors(cells, spy_lo: DecayBitmap, spy_hi: DecayBitmap) -> np.ndarray:
    """Per-cell error flags: flipped at the lower temperature or silent at the upper one."""
    return spy_lo.contains_many(cells) | ~spy_hi.contains_many(cells)


def compute_ber(enroll_lo: DecayBitmap, enroll_hi: DecayBitmap, spy_lo: DecayBitmap, spy_hi: DecayBitmap) -> float:
    """Bit error rate of the candidate indicator cells of one temperature step."""
    for other in (enroll_hi, spy_lo, spy_hi):
        _check_same_region(enroll_lo, other)
    cand = candidate_cells(enroll_lo, enroll_hi)
    if cand.size == 0:
        raise UndefinedBERError("no candidate indicator cells; enlarge the region or lengthen the decay time")
    return float(indicator_errors(cand, spy_lo, spy_hi).mean())


def pool_boards(tables: Sequence[EnrollmentTable]) -> EnrollmentTable:
    """Average real-temperature tables taken on several boards of one model.

    Each pooled record keeps the first board's count as ``flip_count`` and the
    other boards' counts as ``repeat_counts``, so ``mean_counts`` is the
    board average.  Bitmaps are dropped since cell indices differ per board.
    """
    tables = list(tables)
    if not tables:
        raise InsufficientDataError("no tables to pool")
    ref = tables[0]
    for t in tables:
        if t.mode != REAL:
            raise ValueError("only real-temperature tables can be pooled")
        if t.temps != ref.temps or t.base_decay_time_s != ref.base_decay_time_s or t.region_size_bits != ref.region_size_bits:
            raise ValueError("pooled tables must share temperatures, decay time and region size")
    records = []
    for i, r in enumerate(ref.records):
        counts = [c for t in tables for c in t.records[i].all_counts]
        records.append(EnrollmentRecord(r.nominal_temp_c, r.decay_time_s, counts[0], None, (), tuple(counts[1:])))
    return EnrollmentTable(tuple(records), ref.base_decay_time_s, REAL, ref.k_used, None, ref.region_size_bits, {"boards": len(tables)})
