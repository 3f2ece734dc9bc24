import time

import numpy as np
import pytest

from conftest import random_pair_streams
from entlink.sync import (
    ClockSolution,
    CoincidenceHistogram,
    Coincidences,
    LockLostError,
    NoPulseStructureError,
    NoSignificantPeakError,
    OffsetEstimate,
    PULSE_PERIOD_S,
    brute_force_coincidences,
    coincidence_histogram,
    estimate_offset,
    estimate_pulse_phase,
    find_coincidences,
    peak_positions,
    peak_spacing,
    pulse_gate,
    segment_bounds,
    synchronize,
    track_drift,
)
from entlink.timetag import ALICE, BOB, TICK_S, TagStream

ZERO = ClockSolution.constant(0.0)


def test_clock_solution_interpolates_and_extends():
    c = ClockSolution.from_knots([10.0, 20.0, 30.0], [1e-3, 1e-3 + 1e-10, 1e-3 + 3e-10])
    assert c.predict(15.0) == pytest.approx(1e-3 + 0.5e-10, abs=1e-18)
    assert c.predict(40.0) == pytest.approx(1e-3 + 5e-10, abs=1e-18)
    assert c.predict(0.0) == pytest.approx(1e-3 - 1e-10, abs=1e-18)
    assert len(c.segments) == 2


def test_clock_solution_continuous_at_knots():
    c = ClockSolution.from_knots([0.0, 10.0, 20.0], [0.0, 2e-10, 1e-10])
    eps = 1e-9
    for k in (10.0,):
        assert abs(c.predict(k - eps) - c.predict(k + eps)) < TICK_S


def test_clock_solution_validation():
    with pytest.raises(ValueError):
        ClockSolution((1.0, 1.0), (0.0, 0.0))
    with pytest.raises(ValueError):
        ClockSolution((), ())


def test_empty_streams_give_no_pairs():
    e = TagStream(ALICE, 0)
    assert len(find_coincidences(e, TagStream(BOB, 0), ZERO)) == 0


@pytest.mark.parametrize("seed", range(1000))
def test_matcher_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 600))
    a, b = random_pair_streams(rng, n, int(rng.integers(0, 700)), int(rng.integers(0, 700)),
                               span_ticks=int(rng.integers(50, 20000)), jitter_ticks=2.0)
    window = float(rng.choice([0.8e-9, 1e-9, 3 * TICK_S, 20 * TICK_S]))
    clock = ClockSolution.constant(float(rng.normal(0, 2)) * TICK_S)
    got = find_coincidences(a, b, clock, window)
    assert got.index_pairs() == brute_force_coincidences(a.ticks, clock.to_alice_ticks(b.ticks), window)
    assert np.all(np.abs(got.residual_s) <= window / 2 + 1e-18)
    assert np.all(np.diff(got.alice_index) > 0)


def test_tie_goes_to_earlier_tag():
    a = TagStream(ALICE, 0, [10, 14], [0, 0])
    b = TagStream(BOB, 0, [12], [1])
    got = find_coincidences(a, b, ZERO, 6 * TICK_S)
    assert got.index_pairs() == {(0, 0)}


def test_each_tag_matched_once():
    a = TagStream(ALICE, 0, [10, 11, 12], [0, 1, 2])
    b = TagStream(BOB, 0, [11, 12], [0, 1])
    got = find_coincidences(a, b, ZERO, 4 * TICK_S)
    assert len(set(got.alice_index.tolist())) == len(got) == 2


@pytest.mark.parametrize("seed", range(20))
def test_matching_is_symmetric(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = random_pair_streams(rng, 300, 200, 200, 5000, offset_ticks=37)
    clock = ClockSolution.constant(37 * TICK_S)
    fwd = find_coincidences(a, b, clock, 6 * TICK_S).index_pairs()
    a2 = TagStream(ALICE, 0, b.ticks, b.channels)
    b2 = TagStream(BOB, 0, a.ticks, a.channels)
    back = find_coincidences(a2, b2, clock.negated(), 6 * TICK_S).index_pairs()
    assert fwd == {(j, i) for i, j in back}


def test_histogram_total_counts_all_pairs_in_span():
    rng = np.random.default_rng(3)
    a, b = random_pair_streams(rng, 200, 300, 300, 3000)
    span, width = 60 * TICK_S, 2 * TICK_S
    hist = coincidence_histogram(a, b, ZERO, span, width)
    d = b.ticks.astype(np.int64)[None, :] - a.ticks.astype(np.int64)[:, None]
    expected = np.count_nonzero((d * TICK_S >= -span / 2) & (d * TICK_S < span / 2))
    assert hist.total == expected
    assert hist.to_csv().splitlines()[0] == "bin_center_s,count"


def test_histogram_single_bin_for_perfect_pairs():
    t = np.arange(100, dtype=np.uint64) * 1000
    a = TagStream(ALICE, 0, t, np.zeros(100))
    b = TagStream(BOB, 0, t, np.ones(100))
    hist = coincidence_histogram(a, b, ZERO, 20 * TICK_S, TICK_S)
    assert np.count_nonzero(hist.counts) == 1 and hist.total == 100


def test_histogram_rejects_sub_tick_bins():
    with pytest.raises(ValueError):
        coincidence_histogram(TagStream(ALICE, 0), TagStream(BOB, 0), ZERO, 1e-9, 0.5 * TICK_S)


def test_identical_streams_offset_zero():
    rng = np.random.default_rng(4)
    t = np.unique(rng.integers(0, int(1.0 / TICK_S), 20000)).astype(np.uint64)
    a = TagStream(ALICE, 0, t, np.zeros(t.size))
    b = TagStream(BOB, 0, t, np.zeros(t.size))
    est = estimate_offset(a, b, 1e-4)
    assert abs(est.offset_s) <= TICK_S
    assert est.accepted and est.confidence >= 5


def _offset_pair(rng, offset_s, n_pairs=2000, n_noise=20000, duration=2.0, jitter=2.0):
    span = int(duration / TICK_S)
    return random_pair_streams(rng, n_pairs, n_noise, n_noise // 10, span, jitter,
                               offset_ticks=int(round(offset_s / TICK_S)))


@pytest.mark.parametrize("seed", range(10))
def test_offset_sweep(seed):
    rng = np.random.default_rng(200 + seed)
    true = float(rng.uniform(-0.9e-3, 0.9e-3))
    a, b = _offset_pair(rng, true)
    if true < 0:  # keep ticks non-negative
        a = TagStream(ALICE, 0, a.ticks + np.uint64(10**7), a.channels)
        b = TagStream(BOB, 0, b.ticks + np.uint64(10**7), b.channels)
    est = estimate_offset(a, b, 2e-3)
    assert abs(est.offset_s - round(true / TICK_S) * TICK_S) <= TICK_S


def test_light_travel_time_sanity():
    assert 144e3 / 299792458 == pytest.approx(480.3e-6, abs=0.05e-6)


def test_background_only_has_no_peak():
    rng = np.random.default_rng(5)
    a, b = random_pair_streams(rng, 0, 50000, 20000, int(5.0 / TICK_S))
    with pytest.raises(NoSignificantPeakError):
        estimate_offset(a, b, 2e-3)


def test_false_lock_rate_on_background():
    hits = 0
    for seed in range(30):
        rng = np.random.default_rng(300 + seed)
        a, b = random_pair_streams(rng, 0, 20000, 2000, int(2.0 / TICK_S))
        try:
            estimate_offset(a, b, 2e-3)
            hits += 1
        except NoSignificantPeakError:
            pass
    assert hits == 0


def test_empty_stream_raises():
    with pytest.raises(NoSignificantPeakError):
        estimate_offset(TagStream(ALICE, 0), TagStream(BOB, 0, [1], [0]))


def test_segment_bounds_skip_short_tail():
    b = TagStream(BOB, 0, [0, int(24.0 / TICK_S)], [0, 0])
    bounds = segment_bounds(b, 10.0)
    assert len(bounds) == 2
    b = TagStream(BOB, 0, [0, int(26.0 / TICK_S)], [0, 0])
    assert len(segment_bounds(b, 10.0)) == 3


def test_drift_free_segments_agree(short_run):
    sc, a, b, truth = short_run
    est, clock = synchronize(a, b, segment_s=5.0)
    knots = np.asarray(clock.knots_offset_s)
    # drift 1e-11 over 20 s moves the offset by 0.2 ns, about one tick
    assert np.ptp(knots) <= 2 * TICK_S


def test_simulated_offset_recovered(short_run):
    sc, a, b, truth = short_run
    est = estimate_offset(a, b, 2e-3)
    t_true = (est.t_ref_s - 487e-6) / (1 + 1e-11)
    assert abs(est.offset_s - truth.relative_offset_at(t_true)) <= TICK_S


def test_lock_lost_when_bob_goes_dark(short_run):
    sc, a, b, truth = short_run
    est = estimate_offset(a, b)
    # replace the second half of Bob's stream with shifted garbage
    half = len(b) // 2
    junk = b.ticks[half:] + np.uint64(int(3e-6 / TICK_S))
    broken = TagStream(BOB, b.epoch, np.concatenate([b.ticks[:half], junk]), b.channels)
    with pytest.raises(LockLostError):
        track_drift(a, broken, est, 5.0)


def test_free_running_drift_is_tracked(paper_144):
    from entlink.linksim import ChannelConfig, ClockConfig, PartyConfig
    from entlink.simulate import simulate_run
    sc = paper_144.replace(channel=ChannelConfig(20.0, 50.0))
    runs = {}
    for drift in (0.0, 1e-9):
        bob = PartyConfig(sc.bob.detector, ClockConfig(487e-6, drift, False), sc.bob.analyzer)
        a, b, _ = simulate_run(sc.replace(bob=bob), duration_s=30.0, seed=11)
        est, clock = synchronize(a, b, segment_s=5.0, max_drift=2e-9)
        pairs = find_coincidences(a, b, clock)
        runs[drift] = len(pairs)
        if drift:
            assert clock.drift == pytest.approx(drift, abs=1e-11)
    assert runs[1e-9] == pytest.approx(runs[0.0], rel=0.05)


def test_histogram_side_peaks(paper_144):
    # a shorter link makes the accidental side peaks visible within 10 s
    from entlink.linksim import ChannelConfig
    from entlink.simulate import simulate_run
    a, b, _ = simulate_run(paper_144.replace(channel=ChannelConfig(20.0, 50.0)), duration_s=10.0, seed=1)
    _, clock = synchronize(a, b)
    hist = coincidence_histogram(a, b, clock, 40e-9, 2 * TICK_S)
    peaks = peak_positions(hist)
    assert peaks.size >= 7
    assert min(abs(peaks)) < 0.2e-9
    assert peak_spacing(peaks) == pytest.approx(4.016e-9, abs=0.05e-9)


def test_peak_spacing_needs_two_peaks():
    with pytest.raises(ValueError):
        peak_spacing(np.array([1e-9]))


def test_side_peaks_match_true_accidentals(paper_144):
    from entlink.linksim import ChannelConfig
    from entlink.simulate import simulate_run
    a, b, truth = simulate_run(paper_144.replace(channel=ChannelConfig(20.0, 50.0)), duration_s=10.0,
                               seed=2, record_alice_ids=True)
    _, clock = synchronize(a, b)
    w = 0.8e-9
    central = find_coincidences(a, b, clock, w)
    ida = truth.alice_pair_ids[central.alice_index]
    idb = truth.bob_pair_ids[central.bob_index]
    accidental = int(np.count_nonzero((ida < 0) | (ida != idb)))
    side = []
    for k in (-1, 1):
        shifted = ClockSolution(clock.knots_t_s, tuple(o + k * PULSE_PERIOD_S for o in clock.knots_offset_s))
        side.append(len(find_coincidences(a, b, shifted, w)))
    mean_side = np.mean(side)
    assert abs(mean_side - accidental) < 3 * np.sqrt(accidental + mean_side / 2)
    assert mean_side / len(central) == pytest.approx(accidental / len(central), abs=0.03)


def test_gate_equal_to_period_is_identity():
    pairs = Coincidences(np.arange(3), np.arange(3), np.array([1, 2, 3], np.uint64),
                         np.array([1, 2, 3], np.uint64), np.zeros(3, np.uint8), np.zeros(3, np.uint8),
                         np.zeros(3))
    gated, _ = pulse_gate(pairs, PULSE_PERIOD_S, PULSE_PERIOD_S)
    assert gated == pairs


def test_pure_background_has_no_pulse_structure():
    rng = np.random.default_rng(6)
    t = np.sort(rng.integers(0, 10**12, 100_000)).astype(np.uint64)
    with pytest.raises(NoPulseStructureError):
        estimate_pulse_phase(t)


def test_pulse_phase_of_comb():
    rng = np.random.default_rng(7)
    k = np.sort(rng.integers(0, 10**8, 50_000))
    t = np.rint((k * PULSE_PERIOD_S + 1.3e-9 + rng.normal(0, 0.2e-9, k.size)) / TICK_S).astype(np.uint64)
    phase = estimate_pulse_phase(t)
    assert phase == pytest.approx(1.3e-9, abs=0.05e-9)


def test_gating_keeps_in_phase_pairs(short_run):
    sc, a, b, _ = short_run
    _, clock = synchronize(a, b)
    raw = find_coincidences(a, b, clock)
    gated, phase = pulse_gate(raw, reference=a.ticks)
    assert 0.5 * len(raw) < len(gated) < len(raw)


def test_offset_estimate_fields():
    est = OffsetEstimate(1e-3, 10, 1, 10.0)
    assert est.accepted
    assert not OffsetEstimate(0.0, 1, 1, 1.0).accepted
    assert ClockSolution.from_estimate(est).predict(5.0) == 1e-3


def test_histogram_properties():
    h = CoincidenceHistogram(1e-9, np.array([-1e-9, 0.0, 1e-9]), np.array([2, 3]))
    assert h.total == 5
    np.testing.assert_allclose(h.centers_s, [-0.5e-9, 0.5e-9])


def test_throughput():
    rng = np.random.default_rng(8)
    n = 2_000_000
    a, b = random_pair_streams(rng, n // 4, 3 * n // 4, 3 * n // 4, 10**11)
    clock = ClockSolution.constant(0.0)
    t0 = time.perf_counter()
    find_coincidences(a, b, clock)
    rate = len(a) / (time.perf_counter() - t0)
    assert rate >= 1e6
