"""Command-line entry point ``dramspy``.

Exit codes: 0 success, 2 configuration error, 3 insufficient data,
4 attack refused by a defense, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import derive_seed
from .dram import DecayBitmap, decay_measure
from .enrollment import EnrollmentTable
from .errors import ConfigError, InsufficientDataError
from .experiment import (
    OTHER_DEVICE,
    RunConfig,
    agent_config,
    attack,
    default_run_config,
    defend,
    describe,
    enroll,
    load_run_config,
    parse_segments,
    scenario_for,
    spy_board,
)
from .harness.agent import SpyAgent, Truth
from .harness.collector import Collector, CollectorConfig
from .harness.protocol import encode_message
from .harness.run import _join
from .harness.scenario import builtin_scenarios
from .harness.trace import TemperatureTrace, evaluate_trace
from .harness.transport import CollectorServer, SocketTransport
from .inference import ApproxModel, IndicatorCellSet, approx_temperature, decode_temperature, fit_approx_model

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_REFUSED = 0, 1, 2, 3, 4

log = logging.getLogger("dramspy")


class DefenseRefusal(Exception):
    pass


def _echo(msg: str) -> None:
    print(msg, file=sys.stderr)


def _need_file(path, field) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(field, f"file not found: {p}")
    return p


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _comments(prov: dict) -> str:
    return "".join(f"# {k}={v}\n" for k, v in prov.items())


def _json_with_meta(doc: dict, prov: dict) -> str:
    return json.dumps({**doc, "meta": {**doc.get("meta", {}), **prov}}, sort_keys=True, indent=1) + "\n"


def load_model(path) -> ApproxModel | IndicatorCellSet:
    doc = json.loads(_need_file(path, "model").read_text())
    if doc.get("format") == "dramspy.indicator-cells":
        return IndicatorCellSet.from_dict(doc)
    return ApproxModel.from_dict(doc)


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = default_run_config(args.seed if getattr(args, "seed", None) is not None else 0)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(master_seed=args.seed)
    return cfg


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    arr = spy_board(cfg)
    temps = args.temp or [cfg.temps[0]]
    t = args.decay_time if args.decay_time is not None else cfg.decay_time_s
    buf = io.StringIO()
    buf.write(_comments(cfg.provenance()))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["temp_c", "decay_time_s", "flip_count"])
    for i, T in enumerate(temps):
        bm = decay_measure(arr, T, t, derive_seed(cfg.master_seed, "simulate", i))
        w.writerow([f"{T:g}", f"{t:g}", len(bm)])
        if args.bitmap_dir:
            Path(args.bitmap_dir).mkdir(parents=True, exist_ok=True)
            Path(args.bitmap_dir, f"bitmap_{i:03d}.csv").write_text(_comments(cfg.provenance()) + bm.to_csv())
    _write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_enroll(args) -> int:
    cfg = _config(args)
    start = time.perf_counter()
    table = enroll(cfg)
    _write(args.out, table.to_json(include_bitmaps=cfg.keep_bitmaps))
    decay_total = sum(sum(r.decay_time_s for _ in r.all_counts) for r in table.records)
    _echo(
        f"enrolled {len(table)} records ({describe(cfg)}) in {time.perf_counter() - start:.2f}s wall; "
        f"decay time on hardware would be {decay_total / 60:.1f} min"
    )
    return EXIT_OK


def cmd_fit(args) -> int:
    table = EnrollmentTable.from_json(_need_file(args.table, "table").read_text())
    prov = {k: table.meta[k] for k in ("tool", "master_seed", "config_digest") if k in table.meta}
    if args.indicators:
        from .inference import select_indicator_cells

        model = select_indicator_cells(table, args.l)
        doc = model.to_dict()
    else:
        bounds = parse_segments(args.segments, table.temps[0], table.temps[-1])
        model = fit_approx_model(table, bounds, k=args.k)
        doc = model.to_dict()
        _echo(f"fitted {len(model.segments)} segments over {model.t_min:g}..{model.t_max:g} °C")
    _write(args.out, _json_with_meta(doc, prov))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = load_model(args.model)
    out = csv.writer(sys.stdout, lineterminator="\n")
    if isinstance(model, IndicatorCellSet):
        if not args.bitmap:
            raise ConfigError("bitmap", "indicator models decode bitmap files")
        out.writerow(["source", "flips", "decoded_c"])
        for path in args.bitmap:
            text = _need_file(path, "bitmap").read_text()
            bm = DecayBitmap.from_csv(text, model.region_size_bits)
            out.writerow([path, len(bm), f"{decode_temperature(bm, model):g}"])
        return EXIT_OK
    if args.p is not None:
        model = model.with_p(args.p)
    rows = []
    if args.counts:
        lines = [ln for ln in _need_file(args.counts, "counts").read_text().splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or "flips" not in reader.fieldnames:
            raise ConfigError("counts", "counts CSV needs a 'flips' column (and optionally 'timestamp_s')")
        for i, r in enumerate(reader):
            rows.append((r.get("timestamp_s", str(i)), int(r["flips"])))
    for i, f in enumerate(args.flips or []):
        rows.append((str(i), f))
    out.writerow(["timestamp_s", "flips", "t_apx_c"])
    for ts, flips in rows:
        out.writerow([ts, flips, f"{approx_temperature(model, flips):.4f}"])
    return EXIT_OK


def _run_attack(cfg: RunConfig, out) -> int:
    start = time.perf_counter()
    run = attack(cfg)
    if run.refused is not None:
        _write(out, TemperatureTrace.empty().to_csv(cfg.provenance()))
        raise DefenseRefusal(f"attack blocked: {run.refused.reason}; {run.messages_sent} messages sent")
    trace = run.trace
    _write(out, trace.to_csv(cfg.provenance()))
    view = trace if cfg.t_range is None else trace.in_range(*cfg.t_range)
    if len(view):
        s = evaluate_trace(view)
        _echo(
            f"{len(trace)} rows, {run.messages_sent} messages; mean {s.mean_abs_error_c:.3f} °C, "
            f"p95 {s.p95_abs_error_c:.3f} °C, max {s.max_abs_error_c:.3f} °C, lag {s.lag_s:.0f}s"
        )
    if run.final_p is not None and cfg.spy_device == OTHER_DEVICE:
        _echo(f"extrapolation factor p = {run.final_p:.4f}")
    _echo(f"wall {time.perf_counter() - start:.2f}s for {scenario_for(cfg).duration_s / 3600:.1f} h of virtual time")
    return EXIT_OK


def cmd_attack(args) -> int:
    return _run_attack(_config(args), args.out)


def cmd_scenario_run(args) -> int:
    cfg = _config(args).replace(scenario=args.name)
    return _run_attack(cfg, args.out)


def cmd_scenario_list(args) -> int:
    for name in builtin_scenarios():
        print(name)
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = _config(args)
    if cfg.policy.refresh_locked:
        run = attack(cfg)
        raise DefenseRefusal(f"refresh locked: {run.messages_sent} spy messages produced")
    report = defend(cfg)
    _write(args.out, report.to_csv(cfg.provenance()))
    _echo(report.summary().rstrip())
    return EXIT_OK


def cmd_report(args) -> int:
    trace = TemperatureTrace.from_csv(_need_file(args.trace, "trace").read_text())
    if args.range:
        trace = trace.in_range(*args.range)
    if len(trace) == 0:
        raise InsufficientDataError("trace has no rows in range")
    s = evaluate_trace(trace)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(list(s.as_dict()))
    w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in s.as_dict().values()])
    return EXIT_OK


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError("connect", f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def cmd_agent(args) -> int:
    cfg = _config(args)
    indicators = load_model(args.indicators) if args.indicators else None
    if cfg.attack_mode == "indicator" and not isinstance(indicators, IndicatorCellSet):
        raise ConfigError("indicators", "indicator mode needs --indicators FILE")
    acfg = agent_config(cfg, indicators)
    agent = SpyAgent(spy_board(cfg), scenario_for(cfg), acfg)
    chan = SocketTransport(*_host_port(args.connect), max_retries=args.retries, backoff_s=args.backoff)
    truths: list[Truth] = []
    sent = 0
    try:
        for msg, truth in agent.messages():
            if truth is not None:
                truths.append(truth)
            chan.send(encode_message(msg).encode("ascii"))
            sent += 1
        # truth goes to disk before the connection closes so a collector
        # that finishes on disconnect can already join it
        if args.truth:
            buf = io.StringIO()
            buf.write(_comments(cfg.provenance()))
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["timestamp_s", "ambient_true_c", "device_true_c"])
            for t in truths:
                # full precision so the collector's errors match an in-process run
                w.writerow([f"{t.timestamp_s:.3f}", repr(t.ambient_c), repr(t.device_c)])
            Path(args.truth).write_text(buf.getvalue())
    finally:
        chan.close()
    _echo(f"sent {sent} messages ({chan.retries} retries)")
    if agent.refused is not None:
        raise DefenseRefusal(f"attack blocked: {agent.refused.reason}")
    return EXIT_OK


def cmd_collector(args) -> int:
    model = load_model(args.model)
    collector = Collector(CollectorConfig(model, args.calibration_temp))
    server = CollectorServer(collector, args.host, args.listen, max_connections=args.connections).start()
    _echo(f"listening on {server.address[0]}:{server.address[1]}")
    try:
        server.join()
    except KeyboardInterrupt:
        server.stop()
    estimates = collector.finish()
    truths = {}
    prov = {"tool": f"dramspy {__version__}"}
    if args.truth:
        text = _need_file(args.truth, "truth").read_text().splitlines()
        for ln in text:
            if ln.startswith("#") and "=" in ln:
                key, _, value = ln[1:].strip().partition("=")
                prov[key] = value
        lines = [ln for ln in text if ln and not ln.startswith("#")]
        for r in csv.DictReader(lines):
            ts = float(r["timestamp_s"])
            truths[ts] = Truth(ts, float(r["ambient_true_c"]), float(r["device_true_c"]))
    else:
        truths = {e.timestamp_s: Truth(e.timestamp_s, float("nan"), float("nan")) for e in estimates}
    trace = _join(estimates, truths)
    _write(args.out, trace.to_csv(prov))
    _echo(f"{len(estimates)} estimates, {len(collector.gaps)} gaps")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _add_config(p, required=False):
    p.add_argument("--config", required=required, help="INI run configuration (see docs/config.md)")
    p.add_argument("--seed", type=int, help="override run.master_seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dramspy", description="DRAM decay temperature side-channel simulator")
    ap.add_argument("--version", action="version", version=f"dramspy {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="decay measurements on the simulated device")
    _add_config(p)
    p.add_argument("--temp", type=float, action="append", help="temperature °C (repeatable)")
    p.add_argument("--decay-time", type=float)
    p.add_argument("--bitmap-dir", help="also write every bitmap as CSV here")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("enroll", help="write an enrollment table")
    _add_config(p, required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("fit", help="fit an approximation model or pick indicator cells")
    p.add_argument("--table", required=True)
    p.add_argument("--segments", default="grid:5", help="'coarse', 'grid:<step>' or comma-separated bounds")
    p.add_argument("--k", type=float, default=0.07, help="temperature index stored with the model")
    p.add_argument("--indicators", action="store_true", help="select indicator cells instead")
    p.add_argument("--l", type=int, default=3)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decode", help="temperatures from flip counts or bitmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--counts", help="CSV with a flips column")
    p.add_argument("--flips", type=int, nargs="*")
    p.add_argument("--bitmap", nargs="*")
    p.add_argument("--p", type=float, help="extrapolation factor")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("attack", help="enroll, fit and replay the configured scenario")
    _add_config(p, required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="compare attack accuracy with and without the cover")
    _add_config(p, required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="error statistics of a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("agent", help="spy agent streaming to a collector")
    _add_config(p, required=True)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--indicators", help="indicator cell JSON for indicator mode")
    p.add_argument("--truth", help="write ground truth CSV (for offline evaluation)")
    p.add_argument("--retries", type=int, default=5)
    p.add_argument("--backoff", type=float, default=0.2)
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("collector", help="receive spy messages and write a trace")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", type=int, required=True, metavar="PORT")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--out", default="-")
    p.add_argument("--truth", help="ground truth CSV written by the agent")
    p.add_argument("--calibration-temp", type=float, help="known temperature of the calibration message")
    p.add_argument("--connections", type=int, default=1, help="stop after this many agent connections")
    p.set_defaults(func=cmd_collector)

    p = sub.add_parser("scenario", help="built-in scenarios")
    ssub = p.add_subparsers(dest="scenario_command", required=True)
    q = ssub.add_parser("run", help="attack a built-in scenario end to end")
    q.add_argument("--name", required=True)
    _add_config(q)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_scenario_run)
    q = ssub.add_parser("list")
    q.set_defaults(func=cmd_scenario_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        _echo(f"config error: {e}")
        return EXIT_CONFIG
    except InsufficientDataError as e:
        _echo(f"insufficient data: {e}")
        return EXIT_DATA
    except DefenseRefusal as e:
        _echo(f"refused: {e}")
        return EXIT_REFUSED
    except Exception as e:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            raise
        _echo(f"error: {type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
