import logging
import math
import socket
import threading
import time

import numpy as np
import pytest

from dramspy.config import MIB, derive_seeds
from dramspy.dram import build_cell_array
from dramspy.enrollment import enroll_real
from dramspy.errors import ConfigError
from dramspy.harness import (
    AgentConfig,
    CollectorConfig,
    Scenario,
    SpyMessage,
    TemperatureTrace,
    builtin_scenarios,
    evaluate_trace,
    execute_scenario,
    load_scenario,
    run_scenario,
)
from dramspy.harness.agent import IO_BASE_S, IO_PER_BIT_S, io_overhead_s
from dramspy.harness.collector import Collector
from dramspy.harness.transport import CollectorServer, SocketTransport
from dramspy.inference import approx_temperature, fit_approx_model, grid_bounds, select_indicator_cells

GRID = [i * 2.5 for i in range(29)]


@pytest.fixture(scope="module")
def small_model_setup():
    arr = build_cell_array(21, 256 * 1024)
    table = enroll_real(arr, GRID, 120.0, derive_seeds(21, "e", 29), keep_bitmaps=False)
    return arr, fit_approx_model(table, grid_bounds(0, 70, 5))


# -- scenarios -------------------------------------------------------------------


def test_builtin_scenarios_load():
    assert builtin_scenarios() == ["chamber-ramp", "room-daynight", "server-workload"]
    for name in builtin_scenarios():
        sc = load_scenario(name)
        assert sc.duration_s >= sc.schedule[-1][0]
        assert sc.device_lag_tau_s == 180.0
    with pytest.raises(ConfigError):
        load_scenario("nope")


def test_scenario_from_path(tmp_path):
    p = tmp_path / "mine.csv"
    p.write_text("# duration_s=100\n# device_lag_tau_s=0\ntime_s,ambient_c\n0,20\n50,30\n")
    sc = load_scenario(p)
    assert sc.name == "mine" and sc.device_at(25.0) == pytest.approx(25.0)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario("x", ((0, 20), (0, 21)), 10)
    with pytest.raises(ConfigError):
        Scenario("x", ((0, 20), (50, 21)), 10)
    with pytest.raises(ConfigError):
        Scenario("x", ((0, 20),), 10, -1)


def test_device_lag_matches_ode():
    sc = Scenario("s", ((0, 20.0), (100, 20.0), (110, 40.0), (500, 40.0), (900, 25.0)), 1500, 120.0)
    # forward Euler on a fine grid as an independent oracle
    dt = 0.01
    t = np.arange(0, 1500 + dt / 2, dt)
    amb = sc.ambient_at(t)
    dev = np.empty_like(t)
    dev[0] = 20.0
    for i in range(1, t.size):
        dev[i] = dev[i - 1] + dt * (amb[i - 1] - dev[i - 1]) / 120.0
    probe = [50, 105, 200, 480, 700, 1400]
    for p in probe:
        assert sc.device_at(p) == pytest.approx(dev[int(round(p / dt))], abs=0.01)


def test_zero_lag_and_constant():
    sc = Scenario("s", ((0, 20.0), (100, 30.0)), 200, 0.0)
    assert sc.device_at(50.0) == pytest.approx(25.0)
    const = Scenario.constant(33.0, 1000)
    assert const.equivalent_temperature(100, 240, 0.07, 25.0) == pytest.approx(33.0)


def test_equivalent_temperature_exceeds_mean():
    sc = Scenario("s", ((0, 20.0), (240, 40.0)), 240, 0.0)
    t_eq = sc.equivalent_temperature(0, 240, 0.07, 25.0)
    # Jensen: exponential weighting favours the hot end
    assert 30.0 < t_eq < 40.0
    want = 25.0 + math.log((math.exp(0.07 * 15) - math.exp(-0.07 * 5)) / (0.07 * 20)) / 0.07
    assert t_eq == pytest.approx(want, abs=1e-3)


# -- agent cadence and I/O model -------------------------------------------------


def test_io_anchors():
    assert io_overhead_s(256 * 1024) == pytest.approx(8.0)
    assert io_overhead_s(2 * MIB) == pytest.approx(60.0)
    assert IO_BASE_S > 0 and IO_PER_BIT_S > 0


def test_server_cadence_128s(small_model_setup):
    arr, model = small_model_setup
    trace = run_scenario(arr, load_scenario("server-workload"), AgentConfig(decay_time_s=120.0, seed=1), CollectorConfig(model))
    steps = np.diff(trace.timestamp_s)
    assert np.all(steps == 128.0)


def test_room_daynight_288_rows():
    arr = build_cell_array(3, 2 * MIB)
    table = enroll_real(arr, list(np.arange(10.0, 35.01, 2.5)), 60.0, derive_seeds(3, "e", 11), keep_bitmaps=False)
    model = fit_approx_model(table, grid_bounds(10, 35, 5))
    cfg = AgentConfig(decay_time_s=60.0, interval_s=300.0, seed=2)
    trace = run_scenario(arr, load_scenario("room-daynight"), cfg, CollectorConfig(model))
    assert len(trace) == 288
    assert np.all(np.diff(trace.timestamp_s) == 300.0)


def test_constant_noiseless_fixed_point(noiseless):
    arr = build_cell_array(8, 256 * 1024, noiseless)
    table = enroll_real(arr, GRID, 120.0, derive_seeds(8, "e", 29), keep_bitmaps=False)
    model = fit_approx_model(table, grid_bounds(0, 70, 5))
    trace = run_scenario(arr, Scenario.constant(25.0, 3600), AgentConfig(decay_time_s=120.0), CollectorConfig(model))
    want = approx_temperature(model, table.record_at(25.0).flip_count)
    assert len(trace) > 0
    assert np.all(trace.inferred_c == want)
    assert abs(want - 25.0) < 0.5


def test_lag_within_bounds(small_model_setup):
    arr, model = small_model_setup
    sc = load_scenario("server-workload")
    trace = run_scenario(arr, sc, AgentConfig(decay_time_s=120.0, seed=4), CollectorConfig(model))
    lag = evaluate_trace(trace).lag_s
    assert 0.5 * sc.device_lag_tau_s <= lag <= 3 * sc.device_lag_tau_s


def test_calibration_message(small_model_setup):
    arr, model = small_model_setup
    spy = build_cell_array(22, 256 * 1024, arr.params.replace(retention_scale=0.8))
    run = execute_scenario(
        spy,
        Scenario.constant(40.0, 2000),
        AgentConfig(decay_time_s=120.0, calibration_temp_c=40.0),
        CollectorConfig(model, calibration_temp_c=40.0),
    )
    assert run.final_p is not None and run.final_p < 1.0
    assert len(run.trace) > 0


# -- collector and transports ----------------------------------------------------


def test_collector_logs_gaps_and_duplicates(small_model_setup, caplog):
    _, model = small_model_setup
    col = Collector(CollectorConfig(model))
    with caplog.at_level(logging.WARNING):
        for seq in (0, 1, 4, 4, 5):
            col.feed(SpyMessage(seq, float(seq), "d", "r0", 120000, 1000))
    assert col.gaps == [("d", 2, 3)]
    assert col.duplicates == 1
    assert len(col.finish()) == 4
    assert "missing seq 2..3" in caplog.text


def test_indicator_mode_missing_step_counts_as_failed_vote(small_model_setup):
    arr = build_cell_array(5, MIB)
    table = enroll_real(arr, [40.0, 41.0, 42.0, 43.0], 120.0, [1, 2, 3, 4])
    ind = select_indicator_cells(table, 3)
    col = Collector(CollectorConfig(ind))
    for seq, (region, flips) in enumerate([("s1", 3), ("s3", 3)]):
        col.feed(SpyMessage(seq, 10.0, "d", region, 120000, flips))
    with pytest.warns(Warning):
        est = col.finish()
    assert est[0].inferred_c == 43.0
    col = Collector(CollectorConfig(ind))
    col.feed(SpyMessage(0, 10.0, "d", "s1", 120000, 2))
    assert col.finish()[0].inferred_c == 41.0


def test_indicator_attack_end_to_end():
    arr = build_cell_array(6, 2 * MIB)
    temps = list(np.arange(35.0, 62.01, 1.0))
    table = enroll_real(arr, temps, 120.0, derive_seeds(6, "e", len(temps)))
    ind = select_indicator_cells(table, 3)
    cfg = AgentConfig(decay_time_s=120.0, mode="indicator", indicators=ind, seed=3)
    trace = run_scenario(arr, load_scenario("server-workload"), cfg, CollectorConfig(ind))
    assert len(trace) > 50
    assert np.percentile(trace.abs_error_c, 90) <= 1.5


def test_socket_equals_loopback(small_model_setup):
    arr, model = small_model_setup
    sc = load_scenario("server-workload")
    cfg = AgentConfig(decay_time_s=120.0, seed=7)
    a = run_scenario(arr, sc, cfg, CollectorConfig(model), transport="loopback")
    b = run_scenario(arr, sc, cfg, CollectorConfig(model), transport="socket")
    assert a.to_csv() == b.to_csv()


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_socket_retries_until_collector_appears(small_model_setup):
    _, model = small_model_setup
    port = _free_port()
    col = Collector(CollectorConfig(model))
    holder = {}

    def late_start():
        time.sleep(0.3)
        holder["srv"] = CollectorServer(col, "127.0.0.1", port, max_connections=1).start()

    threading.Thread(target=late_start).start()
    chan = SocketTransport("127.0.0.1", port, max_retries=8, backoff_s=0.05)
    chan.send(b"V1 0 1 spy r0 120000 500\n")
    chan.close()
    time.sleep(0.1)
    holder["srv"].join(5)
    assert chan.retries > 0
    assert len(col.finish()) == 1


def test_socket_gives_up():
    chan = SocketTransport("127.0.0.1", _free_port(), max_retries=2, backoff_s=0.01)
    with pytest.raises(ConnectionError):
        chan.send(b"V1 0 1 spy r0 1 1\n")


# -- traces ----------------------------------------------------------------------


def test_evaluate_identical_trace():
    t = np.arange(0, 1000, 100.0)
    trace = TemperatureTrace(t, t / 10, t / 10, t / 10)
    s = evaluate_trace(trace)
    assert s.max_abs_error_c == s.mean_abs_error_c == s.p95_abs_error_c == 0.0
    with pytest.raises(ValueError):
        evaluate_trace(TemperatureTrace.empty())


def test_trace_csv_round_trip():
    trace = TemperatureTrace([0, 128], [30.0, 31.0], [30.0, 30.5], [30.2, 30.4])
    text = trace.to_csv({"master_seed": 1})
    assert text.splitlines()[1] == "timestamp_s,ambient_true_c,device_true_c,inferred_c,abs_error_c"
    back = TemperatureTrace.from_csv(text)
    assert back == trace
    assert np.allclose(back.abs_error_c, np.abs(back.device_true_c - back.inferred_c))


def test_lag_estimate_on_shifted_signal():
    from dramspy.harness.trace import estimate_lag

    t = np.arange(0, 20000, 100.0)
    ref = np.sin(t / 1500.0)
    assert estimate_lag(t, ref, np.sin((t - 300.0) / 1500.0)) == pytest.approx(300.0, abs=10)
