"""End-to-end run generation: source, link, detectors, clocks, tag encoding.

Only pairs that at least one party detects are ever materialised. The
per-pulse categories (Alice only, Bob only, both) are sampled directly,
which is distributionally identical to emitting every pair and thinning
each photon independently, but keeps a 1 Mcps run in bounded memory.
Generation proceeds in time chunks; events near a chunk edge are held
back until jitter can no longer reorder them.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .linksim import (
    BACKGROUND,
    DARK,
    ORIGIN_NAMES,
    PAIR,
    EventBatch,
    GroundTruth,
    PartyConfig,
    bernoulli_positions,
    dead_time_mask,
    link_efficiency_series,
    measure_pairs,
    noise_events,
    poisson_positions,
)
from .scenario import Scenario
from .timetag import ALICE, BOB, MAX_TIME_S, TICK_S, TagStream

log = logging.getLogger(__name__)

FADING_DT_S = 0.1


class _Growable:
    def __init__(self, capacity: int, dtype):
        self.data = np.empty(max(capacity, 16), dtype=dtype)
        self.size = 0

    def extend(self, values: np.ndarray) -> None:
        need = self.size + values.size
        if need > self.data.size:
            grown = np.empty(max(need, int(self.data.size * 1.25)), dtype=self.data.dtype)
            grown[: self.size] = self.data[: self.size]
            self.data = grown
        self.data[self.size:need] = values
        self.size = need

    def view(self) -> np.ndarray:
        return self.data[: self.size]


class _PartyOutput:
    """Dead time, clock and tick encoding for one party, fed chunk by chunk."""

    def __init__(self, party: int, cfg: PartyConfig, expected: int, keep_ids: bool):
        self.party = party
        self.cfg = cfg
        self.carry = EventBatch.empty(party)
        self.last_kept: dict[int, float] = {}
        self.last_tick: dict[int, int] = {}
        self.ticks = _Growable(expected, np.uint64)
        self.channels = _Growable(expected, np.uint8)
        self.counts = np.zeros(3, dtype=np.int64)
        self.pair_ids: list[np.ndarray] = []
        self.origins: list[np.ndarray] = []
        self.keep_ids = keep_ids

    def push(self, batch: EventBatch, release_before: float | None) -> np.ndarray:
        merged = EventBatch.concat([self.carry, batch], self.party).sorted()
        if release_before is None:
            cut = len(merged)
        else:
            cut = int(np.searchsorted(merged.times, release_before))
        ready, self.carry = merged.take(slice(0, cut)), merged.take(slice(cut, None))
        mask = dead_time_mask(ready.times, ready.channels, self.cfg.detector.dead_time_s, self.last_kept)
        ready = ready.take(mask)
        local = self.cfg.clock.local_time(ready.times)
        inside = (local >= 0.0) & (local < MAX_TIME_S)
        ready, local = ready.take(inside), local[inside]
        ticks = np.rint(local / TICK_S).astype(np.uint64)
        if self.cfg.detector.dead_time_s < TICK_S:
            unique = self._drop_same_tick(ticks, ready.channels)
            ready, ticks = ready.take(unique), ticks[unique]
        self.ticks.extend(ticks)
        self.channels.extend(ready.channels)
        self.counts += np.bincount(ready.origin, minlength=3)
        pair_ids = ready.pair_id[ready.origin == PAIR]
        if self.keep_ids:
            self.origins.append(ready.origin)
            self.pair_ids.append(pair_ids)
        return pair_ids

    def _drop_same_tick(self, ticks: np.ndarray, channels: np.ndarray) -> np.ndarray:
        keep = np.ones(ticks.size, dtype=bool)
        for ch in np.unique(channels):
            idx = np.flatnonzero(channels == ch)
            t = ticks[idx].astype(np.int64)
            prev = np.concatenate([[self.last_tick.get(int(ch), -1)], t[:-1]])
            keep[idx[t == prev]] = False
            if idx.size:
                self.last_tick[int(ch)] = int(t[-1])
        return keep

    def stream(self, epoch: int) -> TagStream:
        return TagStream(self.party, epoch, self.ticks.view(), self.channels.view())

    def count_dict(self) -> dict[str, int]:
        return {name: int(self.counts[k]) for k, name in enumerate(ORIGIN_NAMES)}


def simulate_run(
    scenario: Scenario,
    duration_s: float | None = None,
    seed: int | None = None,
    chunk_s: float = 0.25,
    record_alice_ids: bool = False,
) -> tuple[TagStream, TagStream, GroundTruth]:
    """Simulate one run and return ``(alice_stream, bob_stream, truth)``.

    The result depends only on ``(scenario, duration, seed, chunk_s)``.
    ``record_alice_ids`` also stores the pair id of every Alice tag in the
    ground truth (8 bytes per tag, so meant for short runs).
    """
    duration = scenario.duration_s if duration_s is None else float(duration_s)
    seed = scenario.seed if seed is None else int(seed)
    if duration < 0:
        raise ValueError("duration must be >= 0")
    src, channel = scenario.source, scenario.channel
    alice_cfg, bob_cfg = scenario.alice, scenario.bob
    rng_src, rng_meas, rng_a, rng_b, rng_fade = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)
    )

    rep = src.rep_rate_hz
    n_pulses = int(math.floor(duration * rep))
    mu = src.pair_prob_per_pulse
    p_a = src.local_coupling_eff * alice_cfg.detector.efficiency

    loss_series = None
    transmission = channel.transmission
    if channel.fading is not None and duration > 0:
        loss_series = link_efficiency_series(channel.fading, duration, FADING_DT_S, rng_fade)
        transmission = 10.0 ** (-float(loss_series[1].min()) / 10.0)
    p_b = src.local_coupling_eff * transmission * bob_cfg.detector.efficiency

    rate_a = rep * mu * p_a + 4 * alice_cfg.detector.dark_cps
    rate_b = rep * mu * p_b + 4 * (bob_cfg.detector.dark_cps + channel.background_cps_per_detector)
    out_a = _PartyOutput(ALICE, alice_cfg, int(rate_a * duration * 1.002 + 6 * math.sqrt(rate_a * duration + 1) + 64),
                         record_alice_ids)
    out_b = _PartyOutput(BOB, bob_cfg, int(rate_b * duration * 1.01 + 64), True)

    guard = 12.0 * max(alice_cfg.detector.jitter_sigma_s, bob_cfg.detector.jitter_sigma_s) + 1e-9
    pulses_per_chunk = max(1, int(round(chunk_s * rep)))
    emitted = 0
    next_id = 0
    shared_ids: list[np.ndarray] = []
    alice_shared: list[np.ndarray] = []

    first = 0
    while first < n_pulses or first == 0:
        count = min(pulses_per_chunk, n_pulses - first)
        t0 = first / rep
        last_chunk = first + count >= n_pulses
        t1 = duration if last_chunk else (first + count) / rep

        idx, in_a, in_b, n_emitted = _sample_detected_pulses(count, first, mu, p_a, p_b, src.multi_pair, rng_src)
        emitted += n_emitted
        if loss_series is not None and idx.size:
            loss = np.interp(idx / rep, loss_series[0], loss_series[1])
            in_b &= rng_src.random(idx.size) < 10.0 ** (-loss / 10.0) / transmission
        ids = np.arange(next_id, next_id + idx.size, dtype=np.int64)
        next_id += idx.size
        ch_a, ch_b = measure_pairs(scenario.model, idx.size, rng_meas, alice_cfg.analyzer, bob_cfg.analyzer)
        shared_ids.append(ids[in_a & in_b])

        batch_a = _photons(ALICE, idx[in_a] / rep, ch_a[in_a], ids[in_a], alice_cfg, rng_a)
        noise_a = noise_events(ALICE, alice_cfg.detector.dark_cps, DARK, t0, t1, rng_a)
        batch_b = _photons(BOB, idx[in_b] / rep, ch_b[in_b], ids[in_b], bob_cfg, rng_b)
        bg_b = noise_events(BOB, channel.background_cps_per_detector, BACKGROUND, t0, t1, rng_b)
        dark_b = noise_events(BOB, bob_cfg.detector.dark_cps, DARK, t0, t1, rng_b)

        release = None if last_chunk else t1 - guard
        kept_ids = out_a.push(EventBatch.concat([batch_a, noise_a], ALICE), release)
        alice_shared.append(kept_ids[np.isin(kept_ids, shared_ids[-1]) | np.isin(kept_ids, shared_ids[-2] if len(shared_ids) > 1 else [])])
        out_b.push(EventBatch.concat([batch_b, bg_b, dark_b], BOB), release)
        first += count
        if count == 0:
            break

    bob_ids = np.concatenate(out_b.pair_ids) if out_b.pair_ids else np.zeros(0, np.int64)
    alice_ids = np.concatenate(alice_shared) if alice_shared else np.zeros(0, np.int64)
    coincident = int(np.intersect1d(alice_ids, bob_ids).size)
    bob_origin = np.concatenate(out_b.origins) if out_b.origins else np.zeros(0, np.uint8)
    bob_pair_ids = np.full(bob_origin.size, -1, dtype=np.int64)
    bob_pair_ids[bob_origin == PAIR] = bob_ids
    alice_pair_ids = None
    if record_alice_ids:
        alice_origin = np.concatenate(out_a.origins) if out_a.origins else np.zeros(0, np.uint8)
        alice_pair_ids = np.full(alice_origin.size, -1, dtype=np.int64)
        if out_a.pair_ids:
            alice_pair_ids[alice_origin == PAIR] = np.concatenate(out_a.pair_ids)

    truth = GroundTruth(
        emitted_pairs=emitted,
        alice_clock=alice_cfg.clock,
        bob_clock=bob_cfg.clock,
        alice_counts=out_a.count_dict(),
        bob_counts=out_b.count_dict(),
        coincident_pairs=coincident,
        duration_s=duration,
        seed=seed,
        bob_pair_ids=bob_pair_ids,
        bob_origin=bob_origin,
        alice_pair_ids=alice_pair_ids,
    )
    log.debug("simulated %s: alice %d tags, bob %d tags", scenario.name, out_a.ticks.size, out_b.ticks.size)
    return out_a.stream(scenario.epoch), out_b.stream(scenario.epoch), truth


def _photons(party, times, channels, ids, cfg: PartyConfig, rng) -> EventBatch:
    jitter = cfg.detector.jitter_sigma_s
    if jitter > 0 and times.size:
        times = times + rng.normal(0.0, jitter, times.size)
    n = times.size
    return EventBatch(party, times, channels.astype(np.uint8), np.full(n, PAIR, np.uint8), ids)


def _sample_detected_pulses(n, offset, mu, p_a, p_b, multi_pair, rng):
    """Pulse index plus (Alice detects, Bob detects) flags for every pair
    that reaches at least one detector, and the number of pairs emitted."""
    if n <= 0 or mu <= 0:
        empty = np.zeros(0, np.int64)
        return empty, empty.astype(bool), empty.astype(bool), 0
    if multi_pair:
        # independent Poisson thinning of a Poisson pair number
        a_only = poisson_positions(n, mu * p_a * (1 - p_b), rng, offset)
        b_only = poisson_positions(n, mu * (1 - p_a) * p_b, rng, offset)
        both = poisson_positions(n, mu * p_a * p_b, rng, offset)
        undetected = int(rng.poisson(n * mu * (1 - p_a) * (1 - p_b)))
        idx = np.concatenate([a_only, b_only, both])
        in_a = np.concatenate([np.ones(a_only.size, bool), np.zeros(b_only.size, bool), np.ones(both.size, bool)])
        in_b = np.concatenate([np.zeros(a_only.size, bool), np.ones(b_only.size, bool), np.ones(both.size, bool)])
        order = np.argsort(idx, kind="stable")
        return idx[order], in_a[order], in_b[order], idx.size + undetected
    q_any = 1.0 - (1.0 - p_a) * (1.0 - p_b)
    idx = bernoulli_positions(n, mu * q_any, rng, offset)
    u = rng.random(idx.size) * q_any
    both = u < p_a * p_b
    a_only = (u >= p_a * p_b) & (u < p_a)
    in_a = both | a_only
    in_b = ~a_only
    rest = n - idx.size
    p_rest = mu * (1 - q_any) / (1 - mu * q_any) if q_any < 1 else 0.0
    undetected = int(rng.binomial(rest, min(max(p_rest, 0.0), 1.0))) if rest > 0 else 0
    return idx, in_a, in_b, idx.size + undetected
