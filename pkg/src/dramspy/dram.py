"""Seed-deterministic model of a refresh-disabled DRAM region.

Every charged cell has a reference retention time.  Heating the region by
``dT`` shortens all retention times by ``exp(-k * dT)``, so a measurement at
``(T + dT, t)`` selects exactly the same cells as ``(T, t * exp(k * dT))``
when jitter is off.  Discharged cells never flip.

Charged cells are kept sorted by retention time, so a measurement only
touches the short prefix of cells that can possibly flip.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .config import TEMP_MAX_C, TEMP_MIN_C, ModelParams
from .errors import ConfigError, RegionMismatchError, TemperatureRangeError, DecayTimeRangeError

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF
# largest |z| the hash-to-normal mapping can produce (u in [2^-53, 1 - 2^-53])
Z_MAX = float(-ndtri(2.0**-53))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _U64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)
    return x ^ (x >> _U64(31))


def cell_normals(indices: np.ndarray, seed: int) -> np.ndarray:
    """Standard-normal draws keyed by (cell index, seed), independent of call order."""
    idx = np.asarray(indices, dtype=np.uint64)
    s = _splitmix64(np.array([seed & _MASK64], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        h = _splitmix64(idx * _U64(0xD6E8FEB86659FD93) ^ s)
    u = (h >> _U64(11)).astype(np.float64) * 2.0**-53
    u[u == 0.0] = 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class CellArray:
    """A simulated DRAM region.

    Only charged cells carry a retention time.  ``charged_idx`` holds their
    indices ordered by increasing reference retention, ``log_retention`` the
    matching ``ln(retention_ref)`` values (seconds at ``params.ref_temp_c``).
    """

    size_bits: int
    seed: int
    params: ModelParams
    charged: np.ndarray = field(repr=False)
    charged_idx: np.ndarray = field(repr=False)
    log_retention: np.ndarray = field(repr=False)
    _log_sigma: np.ndarray = field(repr=False)
    _flip_bound: np.ndarray = field(repr=False)

    @property
    def ref_temp(self) -> float:
        return self.params.ref_temp_c

    @property
    def k_true(self) -> float:
        return self.params.k_true

    @property
    def noise_sigma(self) -> float:
        return self.params.noise_sigma

    @property
    def polarity(self) -> np.ndarray:
        """True where logical 0 maps to the charged state."""
        return self.charged

    @property
    def n_charged(self) -> int:
        return int(self.charged_idx.size)

    @property
    def retention_ref(self) -> np.ndarray:
        """Per-cell retention at the reference temperature; NaN for discharged cells."""
        out = np.full(self.size_bits, np.nan)
        out[self.charged_idx] = np.exp(self.log_retention)
        return out

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.charged_idx.tobytes())
        h.update(self.log_retention.tobytes())
        return h.hexdigest()

    def log_age(self, temp_c: float, decay_time_s: float) -> float:
        """``ln(t) + k (T - T_ref)``: decay exposure in reference-temperature seconds."""
        return math.log(decay_time_s) + self.params.k_true * (temp_c - self.params.ref_temp_c)

    def fraction_below(self, temp_c: float, decay_time_s: float) -> float:
        """Noiseless flipped fraction of the whole region."""
        if decay_time_s <= 0:
            return 0.0
        n = np.searchsorted(self.log_retention, self.log_age(temp_c, decay_time_s), side="right")
        return n / self.size_bits


def build_cell_array(seed: int, size_bits: int, params: ModelParams | None = None) -> CellArray:
    """Draw polarity and retention for every cell of a region.

    One Bernoulli draw per cell decides polarity; charged cells then get a
    log-normal retention time.  Identical arguments give identical arrays.
    """
    params = (params or ModelParams()).validate()
    if int(size_bits) != size_bits or size_bits < 1:
        raise ConfigError("size_bits", f"must be a positive integer, got {size_bits!r}")
    size_bits = int(size_bits)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & _MASK64)))
    charged = rng.random(size_bits) < params.charged_fraction
    idx_dtype = np.uint32 if size_bits <= 2**32 else np.uint64
    charged_idx = np.flatnonzero(charged).astype(idx_dtype)
    # retention draws are iid, so dealing a sorted sample to a random permutation
    # of the charged cells has the same law as per-cell draws and skips an argsort
    log_ret = np.sort(rng.normal(params.retention_log_mean, params.retention_log_sigma, charged_idx.size))
    log_ret += math.log(params.retention_scale)
    rng.shuffle(charged_idx)
    sigma = _log_sigma(log_ret, params)
    # smallest log threshold each cell can reach under jitter, made non-decreasing
    # by a suffix minimum so that every possible flip lies in a searchsorted prefix
    bound = log_ret - sigma * Z_MAX - 0.5 * sigma**2
    bound = np.minimum.accumulate(bound[::-1])[::-1].copy()
    return CellArray(size_bits, int(seed), params, charged, charged_idx, log_ret, sigma, bound)


def _log_sigma(log_ret: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.noise_sigma == 0:
        return np.zeros_like(log_ret)
    if params.noise_weak_exponent == 0:
        return np.full_like(log_ret, params.noise_sigma)
    return params.noise_sigma * np.exp(params.noise_weak_exponent * (math.log(params.noise_ref_s) - log_ret))


@dataclass(frozen=True, eq=False)
class DecayBitmap:
    """Sorted indices of the cells that flipped in one decay measurement."""

    flipped: np.ndarray
    region_size_bits: int
    temp_c: float = float("nan")
    decay_time_s: float = float("nan")
    measurement_seed: int = 0

    def __post_init__(self):
        arr = np.array(self.flipped, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("flipped must be one-dimensional")
        if arr.size:
            if arr[0] < 0 or arr[-1] >= self.region_size_bits:
                raise ValueError("flipped index outside region")
            if np.any(np.diff(arr) <= 0):
                raise ValueError("flipped indices must be strictly increasing")
        arr.flags.writeable = False
        object.__setattr__(self, "flipped", arr)

    def __len__(self):
        return int(self.flipped.size)

    def __contains__(self, index) -> bool:
        pos = np.searchsorted(self.flipped, index)
        return bool(pos < self.flipped.size and self.flipped[pos] == index)

    def __eq__(self, other):
        if not isinstance(other, DecayBitmap):
            return NotImplemented
        return self.region_size_bits == other.region_size_bits and np.array_equal(self.flipped, other.flipped)

    __hash__ = None

    def contains_many(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        pos = np.searchsorted(self.flipped, idx)
        pos = np.minimum(pos, max(self.flipped.size - 1, 0))
        if self.flipped.size == 0:
            return np.zeros(idx.shape, dtype=bool)
        return self.flipped[pos] == idx

    def issubset(self, other: "DecayBitmap") -> bool:
        _check_same_region(self, other)
        return bool(np.all(other.contains_many(self.flipped)))

    @classmethod
    def empty(cls, region_size_bits, **meta) -> "DecayBitmap":
        return cls(np.empty(0, dtype=np.int64), region_size_bits, **meta)

    @classmethod
    def from_indices(cls, indices, region_size_bits, **meta) -> "DecayBitmap":
        return cls(np.unique(np.asarray(indices, dtype=np.int64)), region_size_bits, **meta)

    # serialization: u64 count + u64 indices, little-endian
    def to_bytes(self) -> bytes:
        return struct.pack("<Q", self.flipped.size) + self.flipped.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, region_size_bits: int, **meta) -> "DecayBitmap":
        if len(data) < 8:
            raise ValueError("truncated bitmap header")
        (n,) = struct.unpack_from("<Q", data, 0)
        if len(data) != 8 + 8 * n:
            raise ValueError(f"bitmap payload length {len(data) - 8} does not match count {n}")
        arr = np.frombuffer(data, dtype="<u8", count=n, offset=8).astype(np.int64)
        return cls(arr, region_size_bits, **meta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index"])
        w.writerows([int(i)] for i in self.flipped)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, region_size_bits: int, **meta) -> "DecayBitmap":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = list(csv.reader(lines))
        if not rows or rows[0] != ["index"]:
            raise ValueError("bitmap CSV must start with an 'index' header")
        return cls(np.array([int(r[0]) for r in rows[1:] if r], dtype=np.int64), region_size_bits, **meta)

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text(self.to_csv())
        else:
            path.write_bytes(self.to_bytes())


def _check_same_region(a: DecayBitmap, b: DecayBitmap) -> None:
    if a.region_size_bits != b.region_size_bits:
        raise RegionMismatchError(f"region sizes differ: {a.region_size_bits} vs {b.region_size_bits}")


def check_temperature(temp_c: float) -> None:
    if not (TEMP_MIN_C <= temp_c <= TEMP_MAX_C):
        raise TemperatureRangeError(
            f"temperature {temp_c} °C outside simulator validity range [{TEMP_MIN_C:g}, {TEMP_MAX_C:g}] °C"
        )


def decay_measure(array: CellArray, temp_c: float, decay_time_s: float, measurement_seed: int = 0) -> DecayBitmap:
    """Disable refresh for ``decay_time_s`` at ``temp_c`` and return the flipped cells."""
    check_temperature(temp_c)
    if not decay_time_s >= 0:
        raise DecayTimeRangeError(f"decay time must be >= 0, got {decay_time_s}")
    meta = dict(temp_c=float(temp_c), decay_time_s=float(decay_time_s), measurement_seed=int(measurement_seed))
    if decay_time_s == 0:
        return DecayBitmap.empty(array.size_bits, **meta)
    log_age = array.log_age(temp_c, decay_time_s)
    if array.params.noise_sigma == 0:
        n = np.searchsorted(array.log_retention, log_age, side="right")
        flipped = np.sort(array.charged_idx[:n].astype(np.int64))
        return DecayBitmap(flipped, array.size_bits, **meta)
    n = np.searchsorted(array._flip_bound, log_age, side="right")
    idx = array.charged_idx[:n]
    sigma = array._log_sigma[:n]
    z = cell_normals(idx, measurement_seed)
    threshold = array.log_retention[:n] + sigma * z - 0.5 * sigma**2
    flipped = np.sort(idx[threshold <= log_age].astype(np.int64))
    return DecayBitmap(flipped, array.size_bits, **meta)


def count_flips(bitmap: DecayBitmap) -> int:
    return len(bitmap)


def equivalent_decay_time(array: CellArray, temp_c: float, decay_time_s: float, at_temp_c: float) -> float:
    """Decay time at ``at_temp_c`` that matches ``decay_time_s`` at ``temp_c``."""
    return decay_time_s * math.exp(array.params.k_true * (temp_c - at_temp_c))


__all__ = [
    "CellArray",
    "DecayBitmap",
    "Z_MAX",
    "build_cell_array",
    "cell_normals",
    "check_temperature",
    "count_flips",
    "decay_measure",
    "equivalent_decay_time",
]
