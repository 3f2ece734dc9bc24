"""Detection-event generation for a pulsed pair source, a lossy link and two clocks.

The pipeline mirrors the physical chain: pulses carry at most one pair,
each pair is measured by two four-channel analyzers, Bob's photon is
thinned by the link and detector, noise clicks are added, detectors are
blocked for their dead time, and finally each party's clock maps true
time onto its local timescale before tick encoding.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .physics import SingletModel, effective_visibility, same_outcome_probability

log = logging.getLogger(__name__)

PAIR, BACKGROUND, DARK = 0, 1, 2
ORIGIN_NAMES = ("pair", "background", "dark")
N_DETECTORS = 4

MAX_PAIR_PROB = 0.1
MAX_FREE_DRIFT = 1e-6
MAX_GPS_DRIFT = 1e-11


@dataclass(frozen=True)
class SourceConfig:
    """Pulsed SPDC source.

    ``local_coupling_eff`` is the probability that a photon of an emitted
    pair ends up in its single-mode fibre; Alice's photon is then detected
    locally, Bob's photon enters the link.

    With ``multi_pair`` set the number of pairs per pulse is Poisson with
    mean ``pair_prob_per_pulse``; otherwise a pulse carries at most one.
    """

    rep_rate_hz: float = 249e6
    pair_prob_per_pulse: float = 0.0277
    local_coupling_eff: float = 0.145
    multi_pair: bool = False

    def __post_init__(self) -> None:
        if self.rep_rate_hz <= 0:
            raise ValueError("rep_rate_hz must be positive")
        if not 0.0 <= self.pair_prob_per_pulse < MAX_PAIR_PROB:
            raise ValueError(
                f"pair_prob_per_pulse must lie in [0, {MAX_PAIR_PROB}) "
                f"(low-gain regime), got {self.pair_prob_per_pulse}"
            )
        if not 0.0 <= self.local_coupling_eff <= 1.0:
            raise ValueError("local_coupling_eff must lie in [0, 1]")

    @property
    def period_s(self) -> float:
        return 1.0 / self.rep_rate_hz

    @property
    def pair_rate_hz(self) -> float:
        return self.rep_rate_hz * self.pair_prob_per_pulse


@dataclass(frozen=True)
class FadingModel:
    """Slow log-normal variation of the link loss.

    ``sigma_db`` is the stationary spread of the loss in dB (a Gaussian in
    dB is log-normal in transmission). With ``tracking`` off the loss only
    grows, at ``drift_db_per_s`` plus non-negative random increments.
    """

    mean_loss_db: float = 27.0
    sigma_db: float = 0.0
    corr_time_s: float = 30.0
    tracking: bool = True
    drift_db_per_s: float = 0.05

    def __post_init__(self) -> None:
        if self.sigma_db < 0 or self.corr_time_s <= 0 or self.drift_db_per_s < 0:
            raise ValueError("invalid fading parameters")


@dataclass(frozen=True)
class ChannelConfig:
    link_loss_db: float = 27.0
    background_cps_per_detector: float = 50.0
    fading: FadingModel | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.link_loss_db) or self.link_loss_db < 0:
            raise ValueError("link_loss_db must be finite and >= 0")
        if self.background_cps_per_detector < 0:
            raise ValueError("background_cps_per_detector must be >= 0")

    @property
    def transmission(self) -> float:
        return 10.0 ** (-self.link_loss_db / 10.0)


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 0.25
    dark_cps: float = 200.0
    jitter_sigma_s: float = 300e-12
    dead_time_s: float = 50e-9

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("detector efficiency must lie in [0, 1]")
        if self.dark_cps < 0 or self.jitter_sigma_s < 0 or self.dead_time_s < 0:
            raise ValueError("dark_cps, jitter_sigma_s and dead_time_s must be >= 0")


@dataclass(frozen=True)
class ClockConfig:
    """Local timescale ``t_local = offset + integral of (1 + drift) dt``.

    ``drift_steps`` optionally changes the drift rate at given true times,
    giving a piecewise-linear (but continuous) clock.
    """

    offset_s: float = 0.0
    drift_rate: float = 0.0
    gps_correction: bool = True
    drift_steps: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        limit = MAX_GPS_DRIFT if self.gps_correction else MAX_FREE_DRIFT
        rates = [self.drift_rate] + [d for _, d in self.drift_steps]
        for d in rates:
            if abs(d) > limit * (1 + 1e-9):
                mode = "GPS-disciplined" if self.gps_correction else "free-running"
                raise ValueError(f"|drift| {abs(d):g} exceeds the {mode} bound {limit:g}")
        starts = [t for t, _ in self.drift_steps]
        if starts != sorted(starts) or any(t < 0 for t in starts):
            raise ValueError("drift_steps must be sorted by non-negative start time")

    def local_time(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        local = t * (1.0 + self.drift_rate) + self.offset_s
        prev_rate = self.drift_rate
        for start, rate in self.drift_steps:
            local = local + np.where(t > start, (t - start) * (rate - prev_rate), 0.0)
            prev_rate = rate
        return local


@dataclass(frozen=True)
class AnalyzerConfig:
    """Analyzer orientation (degrees) selected by each output of the 50/50 splitter."""

    angles: tuple[float, float] = (0.0, 45.0)


class DetectionEvent(NamedTuple):
    true_time_s: float
    party: int
    channel: int
    origin: int
    pair_id: int | None


@dataclass
class EventBatch:
    """Struct-of-arrays container for detection events of one party."""

    party: int
    times: np.ndarray
    channels: np.ndarray
    origin: np.ndarray
    pair_id: np.ndarray

    @classmethod
    def empty(cls, party: int) -> "EventBatch":
        return cls(party, np.zeros(0), np.zeros(0, np.uint8), np.zeros(0, np.uint8), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return int(self.times.size)

    def __getitem__(self, i: int) -> DetectionEvent:
        pid = int(self.pair_id[i])
        return DetectionEvent(float(self.times[i]), self.party, int(self.channels[i]),
                              int(self.origin[i]), pid if pid >= 0 else None)

    def take(self, index) -> "EventBatch":
        return EventBatch(self.party, self.times[index], self.channels[index],
                          self.origin[index], self.pair_id[index])

    def sorted(self) -> "EventBatch":
        order = np.argsort(self.times, kind="stable")
        return self.take(order)

    def counts_by_origin(self) -> dict[str, int]:
        c = np.bincount(self.origin, minlength=3)
        return {name: int(c[k]) for k, name in enumerate(ORIGIN_NAMES)}

    @staticmethod
    def concat(batches: Sequence["EventBatch"], party: int) -> "EventBatch":
        if not batches:
            return EventBatch.empty(party)
        return EventBatch(
            party,
            np.concatenate([b.times for b in batches]),
            np.concatenate([b.channels for b in batches]),
            np.concatenate([b.origin for b in batches]),
            np.concatenate([b.pair_id for b in batches]),
        )


def sample_pair_emissions(cfg: SourceConfig, duration_s: float, rng_seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Pulses that carry a pair during ``[0, duration_s)``.

    Returns ``(pulse_index, emission_time_s)``; times are exactly
    ``pulse_index / rep_rate``.
    """
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    rng = np.random.default_rng(rng_seed)
    n_pulses = int(math.floor(duration_s * cfg.rep_rate_hz))
    if cfg.multi_pair:
        idx = poisson_positions(n_pulses, cfg.pair_prob_per_pulse, rng)
    else:
        idx = bernoulli_positions(n_pulses, cfg.pair_prob_per_pulse, rng)
    return idx, idx / cfg.rep_rate_hz


def bernoulli_positions(n: int, p: float, rng: np.random.Generator, offset: int = 0) -> np.ndarray:
    """Sorted indices in ``[offset, offset + n)`` of successes of ``n`` Bernoulli(p) trials."""
    if n <= 0 or p <= 0.0:
        return np.zeros(0, dtype=np.int64)
    k = int(rng.binomial(n, p))
    idx = rng.choice(n, size=k, replace=False)
    idx.sort()
    return idx.astype(np.int64) + offset


def poisson_positions(n: int, mean: float, rng: np.random.Generator, offset: int = 0) -> np.ndarray:
    """Sorted pulse indices, one entry per event, for Poisson(mean) events per pulse."""
    if n <= 0 or mean <= 0.0:
        return np.zeros(0, dtype=np.int64)
    k = int(rng.poisson(n * mean))
    idx = rng.integers(0, n, size=k, dtype=np.int64)
    idx.sort()
    return idx + offset


def measure_pairs(
    model: SingletModel,
    n: int,
    rng: np.random.Generator,
    alice: AnalyzerConfig = AnalyzerConfig(),
    bob: AnalyzerConfig = AnalyzerConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Measure ``n`` pairs; channel id is ``2 * basis + (0 for '+', 1 for '-')``.

    Each party's 50/50 splitter picks a basis uniformly; outcomes follow
    the singlet joint probability at the selected orientations.
    """
    basis_a = rng.integers(0, 2, size=n, dtype=np.uint8)
    basis_b = rng.integers(0, 2, size=n, dtype=np.uint8)
    ang_a = np.asarray(alice.angles, dtype=np.float64)
    ang_b = np.asarray(bob.angles, dtype=np.float64)
    vis = np.array([[effective_visibility(model, a, b) for b in bob.angles] for a in alice.angles])
    p_same = same_outcome_probability(vis[basis_a, basis_b], ang_a[basis_a], ang_b[basis_b])
    out_a = rng.integers(0, 2, size=n, dtype=np.uint8)
    same = rng.random(n) < p_same
    out_b = np.where(same, out_a, 1 - out_a).astype(np.uint8)
    return 2 * basis_a + out_a, 2 * basis_b + out_b


def measure_pair(
    model: SingletModel,
    rng: np.random.Generator,
    alice: AnalyzerConfig = AnalyzerConfig(),
    bob: AnalyzerConfig = AnalyzerConfig(),
) -> tuple[int, int]:
    a, b = measure_pairs(model, 1, rng, alice, bob)
    return int(a[0]), int(b[0])


def link_efficiency_series(fading: FadingModel, duration_s: float, dt_s: float, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Sampled link loss in dB (positive numbers) at times ``0, dt, 2 dt, ...``.

    Tracking on: Ornstein-Uhlenbeck around the mean with the configured
    correlation time. Tracking off: a non-decreasing ramp.
    """
    if dt_s <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    n = int(math.floor(duration_s / dt_s)) + 1
    t = np.arange(n) * dt_s
    if not fading.tracking:
        steps = fading.drift_db_per_s * dt_s + np.abs(rng.normal(0.0, fading.sigma_db * math.sqrt(dt_s / fading.corr_time_s), n))
        steps[0] = 0.0
        return t, fading.mean_loss_db + np.cumsum(steps)
    if fading.sigma_db == 0.0:
        return t, np.full(n, fading.mean_loss_db)
    rho = math.exp(-dt_s / fading.corr_time_s)
    innov = rng.normal(0.0, fading.sigma_db * math.sqrt(1.0 - rho * rho), n)
    x = np.empty(n)
    x[0] = rng.normal(0.0, fading.sigma_db)
    for k in range(1, n):
        x[k] = rho * x[k - 1] + innov[k]
    return t, fading.mean_loss_db + x


def dead_time_mask(times: np.ndarray, channels: np.ndarray, dead_time_s: float,
                   last_kept: dict[int, float] | None = None) -> np.ndarray:
    """Non-paralysable dead-time filter over time-sorted events.

    ``last_kept`` carries the last recorded click per channel across calls
    and is updated in place.
    """
    keep = np.ones(times.size, dtype=bool)
    if dead_time_s <= 0 or times.size == 0:
        if last_kept is not None:
            _update_last(last_kept, times, channels, keep)
        return keep
    if last_kept is None:
        last_kept = {}
    for ch in np.unique(channels):
        idx = np.flatnonzero(channels == ch)
        t = times[idx]
        prev = last_kept.get(int(ch), -np.inf)
        gaps = np.diff(t, prepend=prev)
        sure = gaps >= dead_time_s
        running = prev
        local = np.ones(t.size, dtype=bool)
        for i in np.flatnonzero(~sure):
            ref = prev if i == 0 else (t[i - 1] if sure[i - 1] else running)
            local[i] = t[i] - ref >= dead_time_s
            running = t[i] if local[i] else ref
        keep[idx] = local
        kept = t[local]
        if kept.size:
            last_kept[int(ch)] = float(kept[-1])
    return keep


def _update_last(last_kept, times, channels, keep) -> None:
    for ch in np.unique(channels):
        t = times[(channels == ch) & keep]
        if t.size:
            last_kept[int(ch)] = float(t[-1])


def noise_events(party: int, rate_per_detector: float, origin: int, t0: float, t1: float,
                 rng: np.random.Generator) -> EventBatch:
    """Poisson clicks, uniform in ``[t0, t1)``, independently on each detector."""
    if rate_per_detector <= 0 or t1 <= t0:
        return EventBatch.empty(party)
    counts = rng.poisson(rate_per_detector * (t1 - t0), size=N_DETECTORS)
    channels = np.repeat(np.arange(N_DETECTORS, dtype=np.uint8), counts)
    times = rng.uniform(t0, t1, size=channels.size)
    n = channels.size
    return EventBatch(party, times, channels, np.full(n, origin, np.uint8), np.full(n, -1, np.int64))


def apply_channel_and_detect(
    events: EventBatch,
    ch: ChannelConfig,
    det: DetectorConfig,
    duration_s: float,
    rng: np.random.Generator,
    survival: float | None = None,
    loss_series: tuple[np.ndarray, np.ndarray] | None = None,
) -> EventBatch:
    """Thin photons by link and detector, add jitter, noise and dead time.

    ``survival`` overrides ``10**(-loss/10) * efficiency`` (used for the
    lossless local arm); ``loss_series`` supplies a time-dependent loss.
    """
    n = len(events)
    if loss_series is not None:
        loss = np.interp(events.times, loss_series[0], loss_series[1])
        p = 10.0 ** (-loss / 10.0) * det.efficiency
    else:
        p = ch.transmission * det.efficiency if survival is None else survival
    keep = rng.random(n) < p
    photons = events.take(keep)
    if det.jitter_sigma_s > 0 and len(photons):
        photons.times = photons.times + rng.normal(0.0, det.jitter_sigma_s, len(photons))
    parts = [photons]
    parts.append(noise_events(events.party, ch.background_cps_per_detector, BACKGROUND, 0.0, duration_s, rng))
    parts.append(noise_events(events.party, det.dark_cps, DARK, 0.0, duration_s, rng))
    merged = EventBatch.concat(parts, events.party).sorted()
    mask = dead_time_mask(merged.times, merged.channels, det.dead_time_s)
    return merged.take(mask)


def apply_clock(times: np.ndarray, clock: ClockConfig) -> np.ndarray:
    """Map true times to the party's local timescale (order preserving)."""
    return clock.local_time(times)


@dataclass(frozen=True)
class PartyConfig:
    detector: DetectorConfig = DetectorConfig()
    clock: ClockConfig = ClockConfig()
    analyzer: AnalyzerConfig = AnalyzerConfig()


@dataclass
class GroundTruth:
    emitted_pairs: int
    alice_clock: ClockConfig
    bob_clock: ClockConfig
    alice_counts: dict[str, int]
    bob_counts: dict[str, int]
    coincident_pairs: int
    duration_s: float
    seed: int | None
    bob_pair_ids: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, np.int64))
    bob_origin: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, np.uint8))
    alice_pair_ids: np.ndarray | None = field(repr=False, default=None)

    @property
    def relative_offset_s(self) -> float:
        """Bob-minus-Alice local time difference at true time zero."""
        return self.bob_clock.offset_s - self.alice_clock.offset_s

    def relative_offset_at(self, true_time_s: float) -> float:
        t = np.array([true_time_s])
        return float(self.bob_clock.local_time(t)[0] - self.alice_clock.local_time(t)[0])

    def summary(self) -> str:
        lines = [
            f"duration_s = {self.duration_s:g}",
            f"seed = {self.seed}",
            f"emitted_pairs = {self.emitted_pairs}",
            f"coincident_pairs = {self.coincident_pairs}",
            f"alice_clock = offset {self.alice_clock.offset_s:.9g} s, drift {self.alice_clock.drift_rate:.3g}",
            f"bob_clock = offset {self.bob_clock.offset_s:.9g} s, drift {self.bob_clock.drift_rate:.3g}",
        ]
        for party, counts in (("alice", self.alice_counts), ("bob", self.bob_counts)):
            total = sum(counts.values())
            rate = total / self.duration_s if self.duration_s > 0 else 0.0
            parts = ", ".join(f"{k} {v}" for k, v in counts.items())
            lines.append(f"{party}_events = {total} ({parts}); {rate:.1f} cps")
        return "\n".join(lines) + "\n"
