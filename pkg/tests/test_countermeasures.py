import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dramspy.config import KIB, derive_seeds
from dramspy.countermeasures import (
    CoverModel,
    DefensePolicy,
    Refused,
    effective_temperature,
    evaluate_defense,
    guarded_decay_measure,
)
from dramspy.dram import build_cell_array, decay_measure
from dramspy.enrollment import enroll_real
from dramspy.errors import ConfigError
from dramspy.harness import AgentConfig, CollectorConfig, Scenario, execute_scenario
from dramspy.inference import fit_approx_model, grid_bounds


def test_identity_cover_is_transparent():
    cover = CoverModel.identity()
    assert cover.is_identity
    for T in (0.0, 25.0, 61.5):
        assert cover(T) == T


def test_cover_at_reference():
    cover = CoverModel()
    assert cover(cover.ref_temp_c) == pytest.approx(cover.ref_temp_c + cover.offset_c + cover.self_heat_c)
    with pytest.raises(ConfigError):
        CoverModel(slope_gain=0.0)


@given(st.floats(-10, 80), st.floats(0, 10))
def test_cover_monotone_and_above_ambient(t, dt):
    cover = CoverModel()
    assert effective_temperature(cover, t + dt) >= effective_temperature(cover, t)
    if t >= cover.ref_temp_c:
        assert cover(t) > t


def test_cover_raises_flips_noiseless(noiseless):
    arr = build_cell_array(4, 256 * KIB, noiseless)
    cover = CoverModel()
    gaps = []
    for T in range(20, 61, 5):
        bare = len(decay_measure(arr, float(T), 120.0))
        covered = len(decay_measure(arr, float(cover(T)), 120.0))
        assert covered > bare
        gaps.append(covered - bare)
    assert all(b > a for a, b in zip(gaps, gaps[1:]))


def test_refresh_locked_refuses_both_pathways(small_array):
    for pathway in ("kernel", "sleep"):
        out = guarded_decay_measure(DefensePolicy(refresh_locked=True), small_array, 40.0, 120.0, 1, pathway)
        assert isinstance(out, Refused)


def test_zero_on_wake_only_hits_sleep(small_array):
    policy = DefensePolicy(zero_on_wake=True)
    slept = guarded_decay_measure(policy, small_array, 60.0, 600.0, 1, "sleep")
    assert len(slept) == 0
    direct = guarded_decay_measure(policy, small_array, 60.0, 600.0, 1, "kernel")
    assert direct == decay_measure(small_array, 60.0, 600.0, 1)
    assert len(direct) > 0
    with pytest.raises(ValueError):
        guarded_decay_measure(policy, small_array, 60.0, 600.0, 1, "dma")


def test_no_policy_delegates(small_array):
    assert guarded_decay_measure(DefensePolicy(), small_array, 45.0, 120.0, 3) == decay_measure(small_array, 45.0, 120.0, 3)


@pytest.fixture(scope="module")
def bare_setup():
    arr = build_cell_array(12, 512 * KIB)
    temps = [i * 2.5 for i in range(29)]
    table = enroll_real(arr, temps, 240.0, derive_seeds(12, "e", len(temps)), keep_bitmaps=False)
    return arr, fit_approx_model(table, grid_bounds(0, 70, 5))


def ramp():
    return Scenario("ramp", ((0, 40.0), (7200, 60.0)), 7200, 0.0)


def test_default_cover_hurts_unaware_attacker(bare_setup):
    arr, model = bare_setup
    rep = evaluate_defense(ramp(), CoverModel(), model, arr, AgentConfig(decay_time_s=240.0, seed=5))
    assert rep.covered_p95_c > 3.0
    assert rep.mean_degradation_c > 2.0
    assert rep.bare_p95_c < 1.0
    assert "degradation" in rep.summary()
    assert rep.to_csv().splitlines()[0] == "condition,rows,mean_abs_error_c,p95_abs_error_c"


def test_identity_cover_changes_nothing(bare_setup):
    arr, model = bare_setup
    rep = evaluate_defense(ramp(), CoverModel.identity(), model, arr, AgentConfig(decay_time_s=240.0, seed=5))
    assert rep.covered_mean_c == rep.bare_mean_c


def test_locked_agent_sends_nothing(bare_setup):
    arr, model = bare_setup
    cfg = AgentConfig(decay_time_s=240.0, policy=DefensePolicy(refresh_locked=True))
    run = execute_scenario(arr, ramp(), cfg, CollectorConfig(model))
    assert run.refused is not None
    assert run.messages_sent == 0 and len(run.trace) == 0


def test_zero_on_wake_sleep_agent_reads_empty_bitmaps(bare_setup):
    arr, model = bare_setup
    cfg = AgentConfig(decay_time_s=240.0, policy=DefensePolicy(zero_on_wake=True), pathway="sleep")
    run = execute_scenario(arr, ramp(), cfg, CollectorConfig(model))
    assert len(run.trace) > 0
    assert np.all(run.trace.inferred_c == run.trace.inferred_c[0])
