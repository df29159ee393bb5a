"""Ambient temperature schedules and the device's thermal response."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import ConfigError

DEFAULT_TAU_S = 180.0


@dataclass(frozen=True)
class Scenario:
    """Piecewise-linear ambient temperature over ``[0, duration_s]``.

    The DRAM follows the ambient with a first-order lag of time constant
    ``device_lag_tau_s`` and starts in equilibrium with the first breakpoint.
    """

    name: str
    schedule: tuple[tuple[float, float], ...]
    duration_s: float
    device_lag_tau_s: float = DEFAULT_TAU_S

    def __post_init__(self):
        sched = tuple((float(t), float(T)) for t, T in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if not sched:
            raise ConfigError("schedule", "needs at least one breakpoint")
        times = [t for t, _ in sched]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("schedule", "breakpoint times must be strictly increasing")
        if self.duration_s < times[-1]:
            raise ConfigError("duration_s", f"{self.duration_s} is before the last breakpoint {times[-1]}")
        if self.device_lag_tau_s < 0:
            raise ConfigError("device_lag_tau_s", "must be >= 0")
        # device temperature at every breakpoint, integrated exactly segment by segment
        dev = [sched[0][1]]
        for (t0, a0), (t1, a1) in zip(sched, sched[1:]):
            dev.append(self._advance(dev[-1], t0, a0, t1, a1, t1))
        object.__setattr__(self, "_dev_at_breaks", tuple(dev))

    @classmethod
    def constant(cls, temp_c: float, duration_s: float, name: str = "constant", tau_s: float = DEFAULT_TAU_S) -> "Scenario":
        return cls(name, ((0.0, temp_c),), duration_s, tau_s)

    def with_tau(self, tau_s: float) -> "Scenario":
        return Scenario(self.name, self.schedule, self.duration_s, tau_s)

    def _advance(self, dev0, t0, a0, t1, a1, t):
        """Device temperature at ``t`` inside the linear ambient segment starting at ``t0``."""
        tau = self.device_lag_tau_s
        slope = (a1 - a0) / (t1 - t0) if t1 > t0 else 0.0
        amb = a0 + slope * (t - t0)
        if tau == 0:
            return amb
        return amb - slope * tau + (dev0 - a0 + slope * tau) * math.exp(-(t - t0) / tau)

    def ambient_at(self, t):
        times = [p[0] for p in self.schedule]
        temps = [p[1] for p in self.schedule]
        return np.interp(t, times, temps)

    def device_at(self, t):
        """Device (DRAM) temperature at time(s) ``t``."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        sched = self.schedule
        times = np.array([p[0] for p in sched])
        out = np.empty_like(ts)
        seg = np.searchsorted(times, ts, side="right") - 1
        for n, (tq, i) in enumerate(zip(ts, seg)):
            if i < 0:
                out[n] = sched[0][1]
            elif i >= len(sched) - 1:
                t0, a0 = sched[-1]
                out[n] = self._advance(self._dev_at_breaks[-1], t0, a0, t0, a0, tq)
            else:
                (t0, a0), (t1, a1) = sched[i], sched[i + 1]
                out[n] = self._advance(self._dev_at_breaks[i], t0, a0, t1, a1, tq)
        return out if np.ndim(t) else float(out[0])

    def window_mean(self, t_start: float, length_s: float) -> tuple[float, float]:
        """Mean ambient and device temperature over ``[t_start, t_start + length_s]``."""
        u = np.linspace(t_start, t_start + length_s, max(33, int(length_s) + 1))
        return float(_trapezoid_mean(self.ambient_at(u))), float(_trapezoid_mean(self.device_at(u)))

    def equivalent_temperature(
        self,
        t_start: float,
        decay_time_s: float,
        k: float,
        ref_temp_c: float,
        transform: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> float:
        """Constant temperature that causes the same decay as the window's device temperature.

        Cell decay accumulates ``exp(k (T(u) - ref))`` over the window, so the
        equivalent temperature is ``ref + ln(mean exp(k (T - ref))) / k``.
        ``transform`` maps device to effective temperature (e.g. a cover).
        """
        n = max(33, int(decay_time_s) + 1)
        u = np.linspace(t_start, t_start + decay_time_s, n)
        temps = self.device_at(u)
        if transform is not None:
            temps = transform(temps)
        mean = _trapezoid_mean(np.exp(k * (temps - ref_temp_c)))
        return ref_temp_c + math.log(mean) / k


def _trapezoid_mean(y: np.ndarray) -> float:
    """Mean of uniformly sampled ``y`` by the trapezoid rule."""
    return float(np.sum((y[1:] + y[:-1]) * 0.5) / (y.size - 1))


def parse_scenario_csv(text: str, name: str) -> Scenario:
    meta, rows = {}, []
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "=" in line:
                key, value = line[1:].split("=", 1)
                meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames != ["time_s", "ambient_c"]:
        raise ConfigError("scenario", "CSV header must be time_s,ambient_c")
    for r in reader:
        rows.append((float(r["time_s"]), float(r["ambient_c"])))
    if not rows:
        raise ConfigError("scenario", "no breakpoints")
    duration = float(meta.get("duration_s", rows[-1][0]))
    tau = float(meta.get("device_lag_tau_s", DEFAULT_TAU_S))
    return Scenario(name, tuple(rows), duration, tau)


def builtin_scenarios() -> list[str]:
    files = resources.files("dramspy").joinpath("data", "scenarios")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".csv"))


def load_scenario(name_or_path) -> Scenario:
    """Load a built-in scenario by name or a schedule CSV by path."""
    path = Path(str(name_or_path))
    if path.suffix == ".csv" and path.is_file():
        return parse_scenario_csv(path.read_text(), path.stem)
    if str(name_or_path) not in builtin_scenarios():
        raise ConfigError("scenario", f"unknown scenario {name_or_path!r}; built-ins: {', '.join(builtin_scenarios())}")
    res = resources.files("dramspy").joinpath("data", "scenarios", f"{name_or_path}.csv")
    return parse_scenario_csv(res.read_text(), str(name_or_path))
