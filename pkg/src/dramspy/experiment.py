"""Run configuration and the end-to-end experiment pipeline used by the CLI.

A single master seed fans out into named sub-streams:

* ``("enroll-board", b)`` builds enrollment board ``b``
* ``("enroll", b)`` seeds the enrollment measurements on board ``b``
* ``("spy-board",)`` builds a separate spy device
* ``("spy",)`` seeds the spy agent's measurements
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import MIB, ModelParams, derive_seed, derive_seeds, format_size, parse_size
from .countermeasures import KERNEL, PATHWAYS, CoverModel, DefensePolicy, DefenseReport, evaluate_defense
from .dram import CellArray, build_cell_array
from .enrollment import (
    MAX_DECAY_S,
    EnrollmentTable,
    enroll_constant_temp,
    enroll_real,
    pool_boards,
)
from .errors import ConfigError
from .harness.agent import COUNT, INDICATOR, AgentConfig
from .harness.collector import CollectorConfig
from .harness.run import LOOPBACK, SOCKET, ScenarioRun, execute_scenario
from .harness.scenario import Scenario, load_scenario
from .inference import DEFAULT_SEGMENT_BOUNDS, ApproxModel, IndicatorCellSet, fit_approx_model, grid_bounds, select_indicator_cells

REAL_MODE = "real"
CONSTANT_MODE = "constant"
SAME_DEVICE = "same"
OTHER_DEVICE = "other"


def parse_temps(text: str) -> tuple[float, ...]:
    """``"0:70:2.5"`` (inclusive range) or ``"20, 25, 30"``."""
    text = str(text).strip()
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return tuple(round(lo + i * step, 6) for i in range(n + 1))
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError("temps", f"expected lo:hi:step or a comma list, got {text!r}") from None


def parse_segments(spec: str, lo: float, hi: float) -> list[float]:
    """``"coarse"`` (0, 25, 45, 70), ``"grid:<step>"`` over ``lo..hi``, or a comma list."""
    spec = str(spec).strip()
    try:
        if spec == "coarse":
            return list(DEFAULT_SEGMENT_BOUNDS)
        if spec.startswith("grid:"):
            return grid_bounds(lo, hi, float(spec[5:]))
        return [float(x) for x in spec.split(",")]
    except ValueError:
        raise ConfigError("fit.segments", f"expected 'coarse', 'grid:<step>' or a comma list, got {spec!r}") from None


@dataclass(frozen=True)
class RunConfig:
    master_seed: int
    region_size_bits: int
    decay_time_s: float = 240.0
    device_id: str = "spy"
    params: ModelParams = ModelParams()
    # enrollment
    enroll_mode: str = REAL_MODE
    temps: tuple[float, ...] = parse_temps("0:70:2.5")
    at_temp_c: float = 25.0
    k: float = 0.07
    repeats: int = 1
    boards: int = 1
    keep_bitmaps: bool = True
    # fitting
    segments: str = "grid:5"
    indicator_l: int = 3
    # attack
    scenario: str = "chamber-ramp"
    attack_mode: str = COUNT
    interval_s: float = 0.0
    tau_s: float | None = None
    calibration_temp_c: float | None = None
    spy_device: str = SAME_DEVICE
    spy_retention_scale: float = 1.0
    transport: str = LOOPBACK
    range_lo_c: float | None = None
    range_hi_c: float | None = None
    # defenses
    cover: CoverModel | None = None
    policy: DefensePolicy = DefensePolicy()
    pathway: str = KERNEL

    def __post_init__(self):
        if self.region_size_bits < 1:
            raise ConfigError("region_size", "must be positive")
        if not 0 < self.decay_time_s <= MAX_DECAY_S:
            raise ConfigError("decay_time_s", f"must be in (0, {MAX_DECAY_S:g}]")
        if self.enroll_mode not in (REAL_MODE, CONSTANT_MODE):
            raise ConfigError("enroll.mode", f"must be {REAL_MODE!r} or {CONSTANT_MODE!r}")
        if len(self.temps) < 2 or any(b <= a for a, b in zip(self.temps, self.temps[1:])):
            raise ConfigError("enroll.temps", "need at least 2 strictly increasing temperatures")
        if self.repeats < 1:
            raise ConfigError("enroll.repeats", "must be >= 1")
        if self.boards < 1:
            raise ConfigError("enroll.boards", "must be >= 1")
        if self.attack_mode not in (COUNT, INDICATOR):
            raise ConfigError("attack.mode", f"must be {COUNT!r} or {INDICATOR!r}")
        if self.attack_mode == INDICATOR and self.boards != 1:
            raise ConfigError("attack.mode", "indicator mode needs a single enrollment board")
        if self.spy_device not in (SAME_DEVICE, OTHER_DEVICE):
            raise ConfigError("attack.spy_device", f"must be {SAME_DEVICE!r} or {OTHER_DEVICE!r}")
        if self.transport not in (LOOPBACK, SOCKET):
            raise ConfigError("attack.transport", f"must be {LOOPBACK!r} or {SOCKET!r}")
        if self.pathway not in PATHWAYS:
            raise ConfigError("defense.pathway", f"must be one of {PATHWAYS}")
        if self.indicator_l < 3 or self.indicator_l % 2 == 0:
            raise ConfigError("fit.l", "must be odd and >= 3")
        self.segment_bounds()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def segment_bounds(self) -> list[float]:
        return parse_segments(self.segments, self.temps[0], self.temps[-1])

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d["temps"] = list(self.temps)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"tool": f"dramspy {__version__}", "master_seed": self.master_seed, "config_digest": self.digest()}

    @property
    def t_range(self) -> tuple[float, float] | None:
        if self.range_lo_c is None and self.range_hi_c is None:
            return None
        return (
            self.range_lo_c if self.range_lo_c is not None else -np.inf,
            self.range_hi_c if self.range_hi_c is not None else np.inf,
        )


def _get(parser, section, key, conv, default=None, required=False):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            return conv(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}", f"invalid value {raw!r}") from None
    if required:
        raise ConfigError(f"{section}.{key}", "missing required setting")
    return default


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(raw)


def _optional_float(raw: str):
    return None if raw.strip().lower() in ("", "none") else float(raw)


KNOWN_KEYS = {
    "run": {"master_seed", "region_size", "decay_time_s", "device_id"},
    "model": {f.name for f in dataclasses.fields(ModelParams)},
    "enroll": {"mode", "temps", "at_temp_c", "k", "repeats", "boards", "keep_bitmaps"},
    "fit": {"segments", "l"},
    "attack": {
        "scenario", "mode", "interval_s", "tau_s", "calibration_temp_c", "spy_device",
        "spy_retention_scale", "transport", "range_lo_c", "range_hi_c",
    },
    "cover": {"enabled", "offset_c", "slope_gain", "ref_temp_c", "self_heat_c"},
    "defense": {"refresh_locked", "zero_on_wake", "pathway"},
}


def run_config_from_parser(parser: configparser.ConfigParser) -> RunConfig:
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(section, "unknown section")
        for key in parser.options(section):
            if key not in KNOWN_KEYS[section]:
                raise ConfigError(f"{section}.{key}", "unknown setting")
    params = ModelParams.from_mapping(dict(parser.items("model"))) if parser.has_section("model") else ModelParams()
    cover = None
    if parser.has_section("cover") and _get(parser, "cover", "enabled", _bool, True):
        cover = CoverModel(
            _get(parser, "cover", "offset_c", float, 2.0),
            _get(parser, "cover", "slope_gain", float, 1.15),
            _get(parser, "cover", "ref_temp_c", float, 25.0),
            _get(parser, "cover", "self_heat_c", float, 1.0),
        )
    size = _get(parser, "run", "region_size", parse_size, required=True)
    return RunConfig(
        master_seed=_get(parser, "run", "master_seed", int, required=True),
        region_size_bits=size,
        decay_time_s=_get(parser, "run", "decay_time_s", float, 240.0),
        device_id=_get(parser, "run", "device_id", str, "spy"),
        params=params,
        enroll_mode=_get(parser, "enroll", "mode", str, REAL_MODE),
        temps=_get(parser, "enroll", "temps", parse_temps, parse_temps("0:70:2.5")),
        at_temp_c=_get(parser, "enroll", "at_temp_c", float, 25.0),
        k=_get(parser, "enroll", "k", float, 0.07),
        repeats=_get(parser, "enroll", "repeats", int, 1),
        boards=_get(parser, "enroll", "boards", int, 1),
        keep_bitmaps=_get(parser, "enroll", "keep_bitmaps", _bool, True),
        segments=_get(parser, "fit", "segments", str, "grid:5"),
        indicator_l=_get(parser, "fit", "l", int, 3),
        scenario=_get(parser, "attack", "scenario", str, "chamber-ramp"),
        attack_mode=_get(parser, "attack", "mode", str, COUNT),
        interval_s=_get(parser, "attack", "interval_s", float, 0.0),
        tau_s=_get(parser, "attack", "tau_s", _optional_float, None),
        calibration_temp_c=_get(parser, "attack", "calibration_temp_c", _optional_float, None),
        spy_device=_get(parser, "attack", "spy_device", str, SAME_DEVICE),
        spy_retention_scale=_get(parser, "attack", "spy_retention_scale", float, 1.0),
        transport=_get(parser, "attack", "transport", str, LOOPBACK),
        range_lo_c=_get(parser, "attack", "range_lo_c", _optional_float, None),
        range_hi_c=_get(parser, "attack", "range_hi_c", _optional_float, None),
        cover=cover,
        policy=DefensePolicy(
            _get(parser, "defense", "refresh_locked", _bool, False),
            _get(parser, "defense", "zero_on_wake", _bool, False),
        ),
        pathway=_get(parser, "defense", "pathway", str, KERNEL),
    )


def load_run_config(path) -> RunConfig:
    from .config import read_config

    try:
        return run_config_from_parser(read_config(path))
    except configparser.Error as e:
        raise ConfigError("config", str(e)) from None


def default_run_config(master_seed: int, **changes) -> RunConfig:
    return RunConfig(master_seed=master_seed, region_size_bits=2 * MIB).replace(**changes)


# -- pipeline -----------------------------------------------------------------


def enrollment_board(cfg: RunConfig, board: int = 0) -> CellArray:
    return build_cell_array(derive_seed(cfg.master_seed, "enroll-board", board), cfg.region_size_bits, cfg.params)


def spy_board(cfg: RunConfig) -> CellArray:
    if cfg.spy_device == SAME_DEVICE:
        return enrollment_board(cfg, 0)
    params = cfg.params.replace(retention_scale=cfg.params.retention_scale * cfg.spy_retention_scale)
    return build_cell_array(derive_seed(cfg.master_seed, "spy-board"), cfg.region_size_bits, params)


def enroll(cfg: RunConfig, boards: list[CellArray] | None = None) -> EnrollmentTable:
    """Enrollment table for ``cfg``; several boards are pooled into averaged counts."""
    boards = boards or [enrollment_board(cfg, b) for b in range(cfg.boards)]
    keep = cfg.keep_bitmaps and len(boards) == 1
    tables = []
    for b, arr in enumerate(boards):
        seeds = derive_seeds(cfg.master_seed, f"enroll-{b}", len(cfg.temps))
        if cfg.enroll_mode == REAL_MODE:
            t = enroll_real(arr, cfg.temps, cfg.decay_time_s, seeds, repeats=cfg.repeats, keep_bitmaps=keep)
        else:
            t = enroll_constant_temp(
                arr, cfg.decay_time_s, cfg.temps, cfg.at_temp_c, cfg.k, seeds, repeats=cfg.repeats, keep_bitmaps=keep
            )
        tables.append(t)
    table = tables[0] if len(tables) == 1 else pool_boards(tables)
    return EnrollmentTable(
        table.records, table.base_decay_time_s, table.mode, table.k_used, table.measured_at_c,
        table.region_size_bits, {**table.meta, **cfg.provenance()},
    )


def fit(cfg: RunConfig, table: EnrollmentTable) -> ApproxModel | IndicatorCellSet:
    if cfg.attack_mode == INDICATOR:
        return select_indicator_cells(table, cfg.indicator_l)
    return fit_approx_model(table, cfg.segment_bounds(), device_id="enroll-0", k=cfg.k if table.k_used is None else table.k_used)


def scenario_for(cfg: RunConfig) -> Scenario:
    sc = load_scenario(cfg.scenario)
    return sc if cfg.tau_s is None else sc.with_tau(cfg.tau_s)


def agent_config(cfg: RunConfig, model) -> AgentConfig:
    return AgentConfig(
        decay_time_s=cfg.decay_time_s,
        interval_s=cfg.interval_s,
        device_id=cfg.device_id,
        seed=derive_seed(cfg.master_seed, "spy"),
        mode=cfg.attack_mode,
        indicators=model if isinstance(model, IndicatorCellSet) else None,
        calibration_temp_c=cfg.calibration_temp_c if cfg.attack_mode == COUNT else None,
        cover=cfg.cover,
        policy=cfg.policy,
        pathway=cfg.pathway,
    )


def attack(cfg: RunConfig, model=None) -> ScenarioRun:
    """Enroll, fit and replay the configured scenario against the spy device."""
    if model is None:
        model = fit(cfg, enroll(cfg))
    collector = CollectorConfig(model, cfg.calibration_temp_c)
    return execute_scenario(spy_board(cfg), scenario_for(cfg), agent_config(cfg, model), collector, cfg.transport)


def defend(cfg: RunConfig, model: ApproxModel | None = None) -> DefenseReport:
    cover = cfg.cover or CoverModel()
    model = model or fit(cfg.replace(attack_mode=COUNT), enroll(cfg))
    base = agent_config(cfg.replace(attack_mode=COUNT), model)
    return evaluate_defense(
        scenario_for(cfg), cover, model, spy_board(cfg), base, CollectorConfig(model, cfg.calibration_temp_c), cfg.t_range
    )


def describe(cfg: RunConfig) -> str:
    return (
        f"region {format_size(cfg.region_size_bits)}, t={cfg.decay_time_s:g}s, "
        f"{len(cfg.temps)} temps {cfg.temps[0]:g}..{cfg.temps[-1]:g} °C, seed {cfg.master_seed}"
    )
