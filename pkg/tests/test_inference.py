import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from dramspy.config import derive_seeds
from dramspy.dram import DecayBitmap, decay_measure
from dramspy.enrollment import REAL, EnrollmentRecord, EnrollmentTable, enroll_real
from dramspy.errors import DegenerateCalibrationError, InsufficientCandidatesError, InsufficientDataError
from dramspy.inference import (
    DEFAULT_SEGMENT_BOUNDS,
    ApproxModel,
    IndicatorCellSet,
    Segment,
    VoteConsistencyWarning,
    approx_temperature,
    calibrate,
    compute_p,
    decode_temperature,
    decode_votes,
    expected_flips,
    fit_approx_model,
    fit_segments,
    grid_bounds,
    majority_vote,
    select_indicator_cells,
    vote_pattern,
)

GRID_0_70 = [i * 2.5 for i in range(29)]


# -- majority vote ---------------------------------------------------------------


@pytest.mark.parametrize("l", [3, 5, 7])
def test_majority_vote_truth_table(l):
    cells = np.arange(l) * 3
    for pattern in itertools.product([0, 1], repeat=l):
        flipped = [c for c, p in zip(cells, pattern) if p]
        assert majority_vote(DecayBitmap.from_indices(flipped, 64), cells) == (sum(pattern) > l / 2)


def test_majority_vote_examples():
    cells = [1, 2, 3]
    assert majority_vote(DecayBitmap.from_indices([1, 3], 8), cells)
    assert not majority_vote(DecayBitmap.from_indices([2], 8), cells)


# -- indicator cells -------------------------------------------------------------


@pytest.fixture(scope="module")
def table_2mib_120(array_2mib):
    temps = list(np.arange(20.0, 45.01, 1.0))
    return enroll_real(array_2mib, temps, 120.0, derive_seeds(5, "enroll", len(temps)), repeats=2)


def test_indicator_selection_l3(table_2mib_120):
    ind = select_indicator_cells(table_2mib_120, 3)
    assert ind.n_cells == 3 * (len(table_2mib_120) - 1)
    for i, cells in enumerate(ind.cells):
        lo, hi = table_2mib_120.records[i].bitmap, table_2mib_120.records[i + 1].bitmap
        assert np.all(hi.contains_many(cells)) and not np.any(lo.contains_many(cells))


def test_indicator_selection_prefers_stable_cells(table_2mib_120):
    ind = select_indicator_cells(table_2mib_120, 3)
    recs = table_2mib_120.records
    for i, cells in enumerate(ind.cells):
        # chosen cells behave as indicators in the repetition as well, when enough exist
        lo, hi = recs[i].repeat_bitmaps[0], recs[i + 1].repeat_bitmaps[0]
        stable = np.setdiff1d(np.intersect1d(hi.flipped, recs[i + 1].bitmap.flipped), np.union1d(lo.flipped, recs[i].bitmap.flipped))
        if stable.size >= 3:
            assert np.all(hi.contains_many(cells) & ~lo.contains_many(cells))


def test_indicator_selection_l21_at_60s(array_2mib):
    temps = list(np.arange(20.0, 45.01, 1.0))
    table = enroll_real(array_2mib, temps, 60.0, derive_seeds(6, "enroll", len(temps)))
    assert select_indicator_cells(table, 21).l == 21


def test_insufficient_candidates_error():
    recs = (
        EnrollmentRecord(20.0, 60.0, 1, DecayBitmap.from_indices([5], 64)),
        EnrollmentRecord(21.0, 60.0, 2, DecayBitmap.from_indices([5, 9], 64)),
    )
    with pytest.raises(InsufficientCandidatesError) as e:
        select_indicator_cells(EnrollmentTable(recs, 60.0, REAL, region_size_bits=64), 3)
    assert e.value.found == 1 and e.value.needed == 3
    assert "a larger DRAM region or a longer decay time t should be used" in str(e.value)


def test_indicator_set_validation_and_json(table_2mib_120):
    ind = select_indicator_cells(table_2mib_120, 3)
    assert IndicatorCellSet.from_json(ind.to_json()).to_json() == ind.to_json()
    with pytest.raises(ValueError):
        IndicatorCellSet(ind.temps, ind.cells, 4, 120.0, ind.region_size_bits)
    with pytest.raises(ValueError):
        select_indicator_cells(table_2mib_120, 2)


def test_decode_noiseless_exact(array_1mib_noiseless):
    temps = list(np.arange(20.0, 45.01, 1.0))
    table = enroll_real(array_1mib_noiseless, temps, 120.0, derive_seeds(1, "e", len(temps)))
    ind = select_indicator_cells(table, 3)
    for T in temps:
        assert decode_temperature(decay_measure(array_1mib_noiseless, T, 120.0, 99), ind) == T
    assert decode_temperature(decay_measure(array_1mib_noiseless, 80.0, 120.0), ind) == 45.0
    assert decode_temperature(decay_measure(array_1mib_noiseless, 0.0, 120.0), ind) == 20.0


@pytest.fixture(scope="module")
def noiseless_indicators(array_1mib_noiseless):
    temps = list(np.arange(20.0, 45.01, 1.0))
    table = enroll_real(array_1mib_noiseless, temps, 120.0, derive_seeds(1, "e", len(temps)))
    return select_indicator_cells(table, 3)


@given(st.floats(10.0, 55.0), st.floats(0.0, 5.0))
def test_decode_monotone_noiseless(array_1mib_noiseless, noiseless_indicators, temp, dt):
    a = decode_temperature(decay_measure(array_1mib_noiseless, temp, 120.0), noiseless_indicators)
    b = decode_temperature(decay_measure(array_1mib_noiseless, temp + dt, 120.0), noiseless_indicators)
    assert a <= b


def test_non_monotone_votes_warn():
    temps = [20.0, 21.0, 22.0, 23.0]
    with pytest.warns(VoteConsistencyWarning):
        assert decode_votes([True, False, True], temps) == 23.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert decode_votes([True, True, False], temps) == 22.0
        assert decode_votes([False, False, False], temps) == 20.0


def test_vote_pattern_region_check(noiseless_indicators):
    with pytest.raises(ValueError):
        vote_pattern(DecayBitmap.empty(64), noiseless_indicators)


# -- approximation function ------------------------------------------------------


def continuous_model(c2s, bounds, c1_first):
    segs, c1 = [], c1_first
    for (lo, hi), c2 in zip(zip(bounds, bounds[1:]), c2s):
        if segs:
            c1 = lo / math.exp(c2 * segs[-1].inverse(lo))
        segs.append(Segment(lo, hi, c1, c2))
    return ApproxModel(tuple(segs))


@given(
    st.tuples(st.floats(1e-4, 1e-2), st.floats(1e-4, 1e-2), st.floats(1e-4, 1e-2)),
    st.floats(1.0, 3.0),
)
def test_fit_recovers_model_family(c2s, c1):
    truth = continuous_model(c2s, DEFAULT_SEGMENT_BOUNDS, c1)
    temps = GRID_0_70
    # 0 °C is excluded from log-space fitting, so its count is irrelevant
    counts = [expected_flips(truth, T) if T > 0.5 else 0.0 for T in temps]
    fitted = fit_segments(temps, counts, DEFAULT_SEGMENT_BOUNDS)
    for a, b in zip(fitted, truth.segments):
        assert a.c1 == pytest.approx(b.c1, rel=1e-6)
        assert a.c2 == pytest.approx(b.c2, rel=1e-6)


def test_fit_on_simulator_reproduces_enrollment(array_2mib):
    table = enroll_real(array_2mib, GRID_0_70, 240.0, derive_seeds(3, "e", 29), keep_bitmaps=False)
    model = fit_approx_model(table, grid_bounds(0.0, 70.0, 5.0))
    assert model.monotone
    for T, c in zip(table.temps, table.counts):
        if T >= 25:
            assert abs(approx_temperature(model, c) - T) <= 0.5


def test_fit_errors():
    recs = tuple(EnrollmentRecord(T, 240.0, 100 * (i + 1)) for i, T in enumerate([10.0, 20.0, 30.0]))
    table = EnrollmentTable(recs, 240.0)
    with pytest.raises(InsufficientDataError):
        fit_approx_model(table, [10.0, 15.0, 30.0])
    with pytest.raises(ValueError):
        fit_approx_model(table, [0.0, 30.0])
    with pytest.raises(ValueError):
        fit_approx_model(table, [30.0, 10.0])


def test_records_near_zero_are_excluded():
    recs = tuple(EnrollmentRecord(T, 240.0, c) for T, c in [(0.0, 10), (0.5, 12), (5.0, 30), (10.0, 60)])
    model = fit_approx_model(EnrollmentTable(recs, 240.0), [0.0, 10.0])
    assert model.segments[0].c1 > 0
    # only the 5 and 10 °C records were used, so the fit passes through them
    assert approx_temperature(model, 30) == pytest.approx(5.0)
    assert approx_temperature(model, 60) == pytest.approx(10.0)


def test_grid_bounds():
    assert grid_bounds(0.0, 70.0, 5.0)[:3] == [0.0, 10.0, 15.0]
    assert grid_bounds(20.0, 40.0, 5.0) == [20.0, 25.0, 30.0, 35.0, 40.0]


def test_compute_p_examples():
    assert compute_p(1000, 1000) == 1.0
    assert compute_p(1000, 800) == 1.25
    with pytest.raises(DegenerateCalibrationError):
        compute_p(1000, 0)


@pytest.fixture(scope="module")
def sim_model(array_2mib):
    table = enroll_real(array_2mib, GRID_0_70, 240.0, derive_seeds(3, "e", 29), keep_bitmaps=False)
    return fit_approx_model(table, grid_bounds(0.0, 70.0, 5.0))


def test_approx_round_trip_and_clamp(sim_model):
    for T, c in sim_model.points:
        if T >= 25:
            assert approx_temperature(sim_model, c) == pytest.approx(T, abs=0.5)
    assert approx_temperature(sim_model, 0) == pytest.approx(sim_model.segments[0].c1)
    assert approx_temperature(sim_model, 10**12) == sim_model.t_max
    with pytest.raises(ValueError):
        approx_temperature(sim_model, -1)


def test_approx_averages_counts(sim_model):
    counts = [4000, 4200, 4400]
    assert approx_temperature(sim_model, counts) == approx_temperature(sim_model, 4200.0)


def test_same_board_calibration_gives_p_one(sim_model):
    bf = dict(sim_model.points)[40.0]
    assert calibrate(sim_model, 40.0, bf).p == 1.0
    # off-grid known temperature inverts the covering segment
    x = expected_flips(sim_model, 41.0)
    assert approx_temperature(sim_model, x) == pytest.approx(41.0)


@given(st.floats(0, 2e5), st.floats(0.2, 5.0))
def test_p_scaling_exact(sim_model, bf, p):
    assert approx_temperature(sim_model.with_p(p), bf) == approx_temperature(sim_model, bf * p)


@given(st.floats(0, 2e5), st.floats(0, 2e5))
def test_approx_monotone_in_count(sim_model, a, b):
    assume(a <= b)
    assert approx_temperature(sim_model, a) <= approx_temperature(sim_model, b)


def test_model_json_round_trip(sim_model):
    back = ApproxModel.from_json(sim_model.with_p(0.8).to_json())
    assert back == sim_model.with_p(0.8)
    assert back.points == sim_model.points


def test_model_invariants():
    with pytest.raises(ValueError):
        ApproxModel((Segment(0, 10, 1.0, 0.1), Segment(11, 20, 1.0, 0.1)))
    with pytest.raises(ValueError):
        ApproxModel((Segment(0, 10, -1.0, 0.1),))
    with pytest.raises(ValueError):
        ApproxModel((Segment(0, 10, 1.0, 0.1),), p=0.0)
