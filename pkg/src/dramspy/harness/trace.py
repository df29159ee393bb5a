"""Inferred temperature traces and their error statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

HEADER = ["timestamp_s", "ambient_true_c", "device_true_c", "inferred_c", "abs_error_c"]


@dataclass(frozen=True, eq=False)
class TemperatureTrace:
    timestamp_s: np.ndarray
    ambient_true_c: np.ndarray
    device_true_c: np.ndarray
    inferred_c: np.ndarray

    def __post_init__(self):
        cols = [np.array(getattr(self, c), dtype=float) for c in HEADER[:4]]
        if len({c.size for c in cols}) != 1:
            raise ValueError("trace columns differ in length")
        for name, c in zip(HEADER[:4], cols):
            c.flags.writeable = False
            object.__setattr__(self, name, c)

    @property
    def abs_error_c(self) -> np.ndarray:
        return np.abs(self.device_true_c - self.inferred_c)

    def __len__(self):
        return int(self.timestamp_s.size)

    def __eq__(self, other):
        if not isinstance(other, TemperatureTrace):
            return NotImplemented
        return self.to_csv() == other.to_csv()

    __hash__ = None

    @classmethod
    def empty(cls) -> "TemperatureTrace":
        return cls(*(np.empty(0) for _ in range(4)))

    def select(self, mask) -> "TemperatureTrace":
        return TemperatureTrace(self.timestamp_s[mask], self.ambient_true_c[mask], self.device_true_c[mask], self.inferred_c[mask])

    def in_range(self, t_lo: float, t_hi: float) -> "TemperatureTrace":
        """Rows whose true device temperature lies in ``[t_lo, t_hi]``."""
        return self.select((self.device_true_c >= t_lo) & (self.device_true_c <= t_hi))

    def to_csv(self, comments: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (comments or {}).items():
            buf.write(f"# {key}={value}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for row in zip(self.timestamp_s, self.ambient_true_c, self.device_true_c, self.inferred_c, self.abs_error_c):
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TemperatureTrace":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader, None)
        if header != HEADER:
            raise ValueError(f"trace CSV header must be {','.join(HEADER)}")
        rows = [[float(v) for v in r] for r in reader]
        if not rows:
            return cls.empty()
        a = np.array(rows)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


@dataclass(frozen=True)
class TraceSummary:
    n: int
    max_abs_error_c: float
    mean_abs_error_c: float
    p95_abs_error_c: float
    lag_s: float

    def as_dict(self) -> dict:
        return {
            "rows": self.n,
            "max_abs_error_c": self.max_abs_error_c,
            "mean_abs_error_c": self.mean_abs_error_c,
            "p95_abs_error_c": self.p95_abs_error_c,
            "lag_s": self.lag_s,
        }


def estimate_lag(t, reference, delayed, max_lag_s: float | None = None) -> float:
    """Shift (seconds) that best aligns ``delayed`` with ``reference``.

    Both series are resampled onto a uniform grid and the lag maximizing
    their normalized cross-correlation is returned; positive means
    ``delayed`` trails ``reference``.
    """
    t = np.asarray(t, dtype=float)
    if t.size < 3:
        return 0.0
    step = max(min(float(np.median(np.diff(t))) / 16, 10.0), 1e-3)
    grid = np.arange(t[0], t[-1] + step / 2, step)
    a = np.interp(grid, t, reference)
    b = np.interp(grid, t, delayed)
    a, b = a - a.mean(), b - b.mean()
    if not a.any() or not b.any():
        return 0.0
    n = grid.size
    max_shift = n // 4 if max_lag_s is None else min(int(max_lag_s / step), n - 2)
    best, best_c = 0, -np.inf
    for s in range(-max_shift, max_shift + 1):
        if s >= 0:
            x, y = a[: n - s], b[s:]
        else:
            x, y = a[-s:], b[: n + s]
        denom = math.sqrt(float(x @ x) * float(y @ y))
        c = float(x @ y) / denom if denom else -np.inf
        if c > best_c:
            best, best_c = s, c
    return best * step


def evaluate_trace(trace: TemperatureTrace, max_lag_s: float | None = None) -> TraceSummary:
    if len(trace) == 0:
        raise ValueError("cannot evaluate an empty trace")
    err = trace.abs_error_c
    lag = estimate_lag(trace.timestamp_s, trace.ambient_true_c, trace.inferred_c, max_lag_s)
    return TraceSummary(len(trace), float(err.max()), float(err.mean()), float(np.percentile(err, 95)), lag)
