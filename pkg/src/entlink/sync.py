"""Offset/drift recovery by cross-correlation, coincidence matching and pulse gating.

Time relation used throughout: ``offset(t_b) = t_b - t_a`` for a photon pair,
as a function of Bob's local time ``t_b``. A :class:`ClockSolution` stores it
as a piecewise-linear curve through per-segment knots, so mapping Bob's tags
onto Alice's timescale is ``t_a = t_b - offset(t_b)``.

All searches work on integer ticks; Alice streams are never copied to float.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import signal, stats

from .timetag import TICK_S, TagStream

log = logging.getLogger(__name__)

DEFAULT_WINDOW_S = 0.8e-9
PRESET_WINDOWS_S = {"gated": 0.8e-9, "nominal": 1.0e-9}
DEFAULT_THRESHOLD = 5.0
PULSE_PERIOD_S = 1.0 / 249e6
PROBE_SMEAR_BINS = 4
MIN_PROBE_S = 1.0

_MAX_BLOCK = 1 << 22


class SyncError(RuntimeError):
    """Base class for synchronisation failures."""


class NoSignificantPeakError(SyncError):
    def __init__(self, confidence: float, threshold: float, where: str = ""):
        self.confidence = confidence
        self.threshold = threshold
        super().__init__(f"no significant peak{where}: confidence {confidence:.2f} < {threshold:g}")


class LockLostError(SyncError):
    def __init__(self, segment: int, t_start_s: float, confidence: float, threshold: float):
        self.segment = segment
        self.t_start_s = t_start_s
        self.confidence = confidence
        self.threshold = threshold
        super().__init__(
            f"lock lost in segment {segment} (t_b = {t_start_s:.3f} s): "
            f"confidence {confidence:.2f} < {threshold:g}"
        )


class NoPulseStructureError(SyncError):
    pass


@dataclass(frozen=True)
class OffsetEstimate:
    """Peak of the Bob-minus-Alice residual distribution.

    ``offset_s`` applies at Bob local time ``t_ref_s``; ``drift`` is the
    local slope when it was fitted, else 0.
    """

    offset_s: float
    peak_height: float
    background_level: float
    confidence: float
    t_ref_s: float = 0.0
    drift: float = 0.0
    n_peak: int = 0

    @property
    def accepted(self) -> bool:
        return self.confidence > 1.0


@dataclass(frozen=True)
class ClockSolution:
    """Piecewise-linear ``offset(t_b)`` through knots ``(t_b, offset)``.

    Between knots the offset is interpolated linearly, so the map is exactly
    continuous; outside the knot range the nearest segment is extended.
    A single knot carries ``drift`` as its slope.
    """

    knots_t_s: tuple[float, ...]
    knots_offset_s: tuple[float, ...]
    drift: float = 0.0

    def __post_init__(self) -> None:
        if len(self.knots_t_s) != len(self.knots_offset_s) or not self.knots_t_s:
            raise ValueError("need at least one knot and matching arrays")
        if any(b <= a for a, b in zip(self.knots_t_s, self.knots_t_s[1:])):
            raise ValueError("knot times must be strictly increasing")

    @classmethod
    def constant(cls, offset_s: float, drift: float = 0.0, t_ref_s: float = 0.0) -> "ClockSolution":
        return cls((float(t_ref_s),), (float(offset_s),), float(drift))

    @classmethod
    def from_estimate(cls, est: OffsetEstimate) -> "ClockSolution":
        return cls.constant(est.offset_s, est.drift, est.t_ref_s)

    @classmethod
    def from_knots(cls, t_s, offset_s) -> "ClockSolution":
        t = np.asarray(t_s, dtype=float)
        o = np.asarray(offset_s, dtype=float)
        drift = float(np.polyfit(t, o, 1)[0]) if t.size >= 2 else 0.0
        return cls(tuple(t.tolist()), tuple(o.tolist()), drift)

    @property
    def segments(self) -> list[tuple[float, float, float]]:
        """``(t_start, offset at t_start, slope)`` for each linear piece."""
        t = self.knots_t_s
        o = self.knots_offset_s
        if len(t) == 1:
            return [(t[0], o[0], self.drift)]
        return [(t[k], o[k], (o[k + 1] - o[k]) / (t[k + 1] - t[k])) for k in range(len(t) - 1)]

    def offset_at(self, t_b_s) -> np.ndarray:
        t = np.asarray(t_b_s, dtype=float)
        kt = np.asarray(self.knots_t_s)
        ko = np.asarray(self.knots_offset_s)
        if kt.size == 1:
            return ko[0] + self.drift * (t - kt[0])
        out = np.interp(t, kt, ko)
        lo, hi = t < kt[0], t > kt[-1]
        if lo.any():
            out[lo] = ko[0] + (ko[1] - ko[0]) / (kt[1] - kt[0]) * (t[lo] - kt[0])
        if hi.any():
            out[hi] = ko[-1] + (ko[-1] - ko[-2]) / (kt[-1] - kt[-2]) * (t[hi] - kt[-1])
        return out

    def predict(self, t_b_s: float) -> float:
        return float(self.offset_at(np.array([t_b_s]))[0])

    def to_alice_ticks(self, b_ticks: np.ndarray) -> np.ndarray:
        """Bob ticks mapped onto Alice's timescale, as float ticks."""
        b = np.asarray(b_ticks).astype(np.float64)
        return b - self.offset_at(b * TICK_S) / TICK_S

    def negated(self) -> "ClockSolution":
        """Map for the swapped roles (only exact for a constant offset)."""
        return ClockSolution(self.knots_t_s, tuple(-o for o in self.knots_offset_s), -self.drift)


class CoincidencePair(NamedTuple):
    alice_index: int
    bob_index: int
    alice_tick: int
    bob_tick: int
    alice_channel: int
    bob_channel: int
    residual_s: float


@dataclass(eq=False)
class Coincidences:
    """Matched tag pairs, sorted by Alice index (struct of arrays)."""

    alice_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    bob_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    alice_tick: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    bob_tick: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    alice_channel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    bob_channel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    residual_s: np.ndarray = field(default_factory=lambda: np.zeros(0))

    _FIELDS = ("alice_index", "bob_index", "alice_tick", "bob_tick", "alice_channel", "bob_channel", "residual_s")

    def __len__(self) -> int:
        return int(self.alice_index.size)

    def __getitem__(self, i: int) -> CoincidencePair:
        return CoincidencePair(*(getattr(self, f)[i].item() for f in self._FIELDS))

    def __iter__(self) -> Iterator[CoincidencePair]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Coincidences):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self._FIELDS)

    def take(self, index) -> "Coincidences":
        return Coincidences(*(getattr(self, f)[index] for f in self._FIELDS))

    def index_pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.alice_index.tolist(), self.bob_index.tolist()))

    @staticmethod
    def concat(parts: list["Coincidences"]) -> "Coincidences":
        if not parts:
            return Coincidences()
        return Coincidences(*(np.concatenate([getattr(p, f) for p in parts]) for f in Coincidences._FIELDS))


@dataclass(frozen=True)
class CoincidenceHistogram:
    bin_width_s: float
    edges_s: np.ndarray
    counts: np.ndarray

    @property
    def centers_s(self) -> np.ndarray:
        return 0.5 * (self.edges_s[:-1] + self.edges_s[1:])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        rows = ["bin_center_s,count"]
        rows += [f"{c:.6e},{int(n)}" for c, n in zip(self.centers_s, self.counts)]
        return "\n".join(rows) + "\n"


def _as_i64(ticks: np.ndarray) -> np.ndarray:
    ticks = np.ascontiguousarray(ticks)
    if ticks.dtype == np.uint64:
        return ticks.view(np.int64)
    return ticks.astype(np.int64, copy=False)


def _iter_candidates(a: np.ndarray, x: np.ndarray, lo: float, hi: float,
                     max_block: int = _MAX_BLOCK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x_index, a_index)`` blocks for all ``x - a`` in ``[lo, hi]``.

    ``a`` holds sorted int64 ticks, ``x`` float ticks (any order).
    """
    if a.size == 0 or x.size == 0:
        return
    start = np.searchsorted(a, np.ceil(x - hi).astype(np.int64), side="left")
    stop = np.searchsorted(a, np.floor(x - lo).astype(np.int64), side="right")
    counts = stop - start
    cum = np.cumsum(counts)
    first = 0
    while first < x.size:
        base = cum[first - 1] if first else 0
        last = int(np.searchsorted(cum, base + max_block, side="right"))
        last = max(last, first + 1)
        sel = slice(first, last)
        c = counts[sel]
        n = int(c.sum())
        if n:
            xi = np.repeat(np.arange(first, last, dtype=np.int64), c)
            offs = np.arange(n, dtype=np.int64) - np.repeat(np.cumsum(c) - c, c)
            yield xi, np.repeat(start[sel], c) + offs
        first = last


def _boxcar(h: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return h.astype(np.float64)
    c = np.concatenate([[0], np.cumsum(h, dtype=np.float64)])
    half = k // 2
    lo = np.clip(np.arange(h.size) - half, 0, h.size)
    hi = np.clip(np.arange(h.size) - half + k, 0, h.size)
    return c[hi] - c[lo]


def _locate(a: np.ndarray, b_ticks: np.ndarray, model_ticks: np.ndarray, half_ticks: float,
            bin_ticks: float, smooth: int, fit_slope: bool, t_ref_s: float,
            window_ticks: float) -> tuple[float, float, float, float, float, int]:
    """Find the residual peak of ``(b - model) - a`` inside ``+-half``.

    Returns ``(residual_at_ref_ticks, slope, peak, background, confidence, n)``.
    """
    x = b_ticks.astype(np.float64) - model_ticks
    nbins = max(1, int(math.ceil(2 * half_ticks / bin_ticks)))
    hist = np.zeros(nbins, dtype=np.int64)
    for xi, ai in _iter_candidates(a, x, -half_ticks, half_ticks):
        r = x[xi] - a[ai]
        idx = np.clip(((r + half_ticks) / bin_ticks).astype(np.int64), 0, nbins - 1)
        hist += np.bincount(idx, minlength=nbins)
    smoothed = _boxcar(hist, smooth)
    p = int(np.argmax(smoothed))
    peak = float(smoothed[p])
    guard = smooth + max(1, int(math.ceil(1.5e-9 / (bin_ticks * TICK_S))))
    outside = np.concatenate([smoothed[: max(0, p - guard)], smoothed[p + guard + 1:]])
    background = float(outside.max()) if outside.size else 0.0
    confidence = peak / max(background, 1.0)

    center = (p + 0.5) * bin_ticks - half_ticks
    wide = (smooth / 2 + 2) * bin_ticks
    t_b = b_ticks.astype(np.float64) * TICK_S - t_ref_s
    rs, ts = [], []
    for xi, ai in _iter_candidates(a, x, center - wide, center + wide):
        rs.append(x[xi] - a[ai])
        ts.append(t_b[xi])
    r = np.concatenate(rs) if rs else np.zeros(0)
    t = np.concatenate(ts) if ts else np.zeros(0)
    level, slope, n = center, 0.0, 0
    for h in (wide, 2 * window_ticks, window_ticks, window_ticks, window_ticks):
        resid = r - (level + slope * t)
        keep = np.abs(resid) <= h
        n = int(keep.sum())
        if n == 0:
            break
        if fit_slope and n >= 10 and np.ptp(t[keep]) > 0:
            slope_new, level = np.polyfit(t[keep], r[keep], 1)
            slope = float(slope_new)
        else:
            level = float(np.mean(r[keep] - slope * t[keep]))
    return float(level), slope, peak, background, confidence, n


def estimate_offset(
    a: TagStream,
    b: TagStream,
    search_span_s: float = 2e-3,
    coarse_bin_s: float = 1e-9,
    *,
    probe_s: float = 10.0,
    center_s: float = 0.0,
    threshold: float = DEFAULT_THRESHOLD,
    max_drift: float = 1e-11,
    window_s: float = DEFAULT_WINDOW_S,
) -> OffsetEstimate:
    """Two-stage cross-correlation of the first ``probe_s`` of Bob's tags.

    If the peak is not significant the probe is doubled until it is, or
    until Bob's stream runs out.

    A coarse residual histogram over ``center +- span/2`` locates the peak;
    the peak is then refined at tick resolution by an iterated truncated
    centroid. The confidence is the (smoothed) peak height divided by the
    strongest competing bin outside the peak neighbourhood.
    """
    if len(a) == 0 or len(b) == 0:
        raise NoSignificantPeakError(0.0, threshold, " (empty stream)")
    if coarse_bin_s < TICK_S:
        raise ValueError("coarse bin must be at least one tick")
    a_i64 = _as_i64(a.ticks)
    b0 = int(b.ticks[0])
    probe = first_probe_s(probe_s, coarse_bin_s, max_drift)
    while True:
        b_end = int(np.searchsorted(b.ticks, np.uint64(b0 + int(probe / TICK_S)), side="left"))
        est = _probe(a_i64, b.ticks[: max(b_end, 1)], probe, search_span_s, coarse_bin_s,
                     center_s, max_drift, window_s)
        if est.confidence >= threshold or b_end >= len(b) or not may_extend_probe(probe, coarse_bin_s, max_drift):
            break
        # weak signal: integrate longer before giving up
        probe *= 2
    log.debug("offset estimate %.12f s, confidence %.2f, probe %.1f s", est.offset_s, est.confidence, probe)
    if est.confidence < threshold:
        raise NoSignificantPeakError(est.confidence, threshold)
    return est


def _probe_cap_s(coarse_bin_s: float, max_drift: float) -> float:
    # beyond this the drift smears the peak over more than a few coarse bins,
    # and a longer probe adds background faster than signal
    return math.inf if max_drift <= 0 else PROBE_SMEAR_BINS * coarse_bin_s / max_drift


def first_probe_s(probe_s: float, coarse_bin_s: float, max_drift: float) -> float:
    return min(probe_s, max(MIN_PROBE_S, _probe_cap_s(coarse_bin_s, max_drift)))


def may_extend_probe(probe_s: float, coarse_bin_s: float, max_drift: float) -> bool:
    return 2 * probe_s <= _probe_cap_s(coarse_bin_s, max_drift)


def _probe(a_i64, b_sel, probe_s, search_span_s, coarse_bin_s, center_s, max_drift, window_s) -> OffsetEstimate:
    t_ref = 0.5 * float(int(b_sel[0]) + int(b_sel[-1])) * TICK_S
    smooth = 1
    if max_drift * probe_s > coarse_bin_s:
        smooth = int(math.ceil(max_drift * probe_s / coarse_bin_s)) + 1
    model = np.full(b_sel.size, center_s / TICK_S)
    level, slope, peak, bg, conf, n = _locate(
        a_i64, b_sel, model, 0.5 * search_span_s / TICK_S, coarse_bin_s / TICK_S,
        smooth, smooth > 1, t_ref, window_s / TICK_S,
    )
    return OffsetEstimate(center_s + level * TICK_S, peak, bg, conf, t_ref, slope * TICK_S, n)


def segment_bounds(b: TagStream, segment_s: float) -> list[tuple[int, int, float]]:
    """Bob-tick segments ``(start_tick, stop_tick, midpoint_s)`` used for tracking.

    Segments start at Bob's first tag. A trailing partial segment shorter
    than half a segment is folded into no knot.
    """
    if len(b) == 0:
        return []
    seg = int(round(segment_s / TICK_S))
    first, last = int(b.ticks[0]), int(b.ticks[-1])
    out = []
    k = 0
    while first + k * seg <= last:
        lo = first + k * seg
        hi = lo + seg
        if last - lo < seg // 2 and k > 0:
            break
        out.append((lo, hi, (lo + 0.5 * seg) * TICK_S))
        k += 1
    return out


def track_segment(a_i64: np.ndarray, b: TagStream, lo: int, hi: int, mid_s: float,
                  prediction: ClockSolution, *, half_s: float, coarse_bin_s: float,
                  window_s: float) -> OffsetEstimate:
    """Re-estimate the offset in one Bob segment around the predicted curve."""
    i, j = np.searchsorted(b.ticks, np.array([lo, hi], dtype=np.uint64))
    b_sel = b.ticks[i:j]
    if b_sel.size == 0:
        return OffsetEstimate(prediction.predict(mid_s), 0.0, 0.0, 0.0, mid_s)
    model = prediction.offset_at(b_sel.astype(np.float64) * TICK_S) / TICK_S
    # the residual is relative to the predicted curve, so reference it at mid
    base = prediction.predict(mid_s) / TICK_S
    level, _, peak, bg, conf, n = _locate(
        a_i64, b_sel, model, half_s / TICK_S, coarse_bin_s / TICK_S, 1, False, mid_s, window_s / TICK_S,
    )
    return OffsetEstimate((base + level) * TICK_S, peak, bg, conf, mid_s, 0.0, n)


def track_drift(
    a: TagStream,
    b: TagStream,
    initial: OffsetEstimate,
    segment_s: float = 10.0,
    *,
    half_s: float = 20e-9,
    coarse_bin_s: float = 1e-9,
    threshold: float = DEFAULT_THRESHOLD,
    window_s: float = DEFAULT_WINDOW_S,
) -> ClockSolution:
    """Follow the offset segment by segment and return the knot curve.

    Each segment is searched around the curve predicted from the knots of
    earlier segments only, so the result can be reproduced causally.
    """
    tracker = DriftTracker(initial, half_s=half_s, coarse_bin_s=coarse_bin_s,
                           threshold=threshold, window_s=window_s)
    a_i64 = _as_i64(a.ticks)
    for k, (lo, hi, mid) in enumerate(segment_bounds(b, segment_s)):
        tracker.add_segment(a_i64, b, k, lo, hi, mid)
    return tracker.solution()


class DriftTracker:
    """Incremental state of :func:`track_drift`, shared with the online engine."""

    def __init__(self, initial: OffsetEstimate, *, half_s: float = 20e-9, coarse_bin_s: float = 1e-9,
                 threshold: float = DEFAULT_THRESHOLD, window_s: float = DEFAULT_WINDOW_S):
        self.initial = initial
        self.half_s = half_s
        self.coarse_bin_s = coarse_bin_s
        self.threshold = threshold
        self.window_s = window_s
        self.knots_t: list[float] = []
        self.knots_o: list[float] = []
        self.estimates: list[OffsetEstimate] = []

    def prediction(self) -> ClockSolution:
        if not self.knots_t:
            return ClockSolution.from_estimate(self.initial)
        if len(self.knots_t) == 1:
            return ClockSolution.constant(self.knots_o[0], self.initial.drift, self.knots_t[0])
        return ClockSolution(tuple(self.knots_t), tuple(self.knots_o))

    def add_segment(self, a_i64: np.ndarray, b: TagStream, k: int, lo: int, hi: int, mid: float) -> OffsetEstimate:
        est = track_segment(a_i64, b, lo, hi, mid, self.prediction(), half_s=self.half_s,
                            coarse_bin_s=self.coarse_bin_s, window_s=self.window_s)
        if est.confidence < self.threshold:
            raise LockLostError(k, lo * TICK_S, est.confidence, self.threshold)
        self.knots_t.append(mid)
        self.knots_o.append(est.offset_s)
        self.estimates.append(est)
        return est

    def solution(self) -> ClockSolution:
        if not self.knots_t:
            return ClockSolution.from_estimate(self.initial)
        if len(self.knots_t) == 1:
            return ClockSolution.constant(self.knots_o[0], self.initial.drift, self.knots_t[0])
        return ClockSolution.from_knots(self.knots_t, self.knots_o)


def synchronize(a: TagStream, b: TagStream, *, search_span_s: float = 2e-3, coarse_bin_s: float = 1e-9,
                probe_s: float = 10.0, segment_s: float = 10.0, threshold: float = DEFAULT_THRESHOLD,
                window_s: float = DEFAULT_WINDOW_S, max_drift: float = 1e-11) -> tuple[OffsetEstimate, ClockSolution]:
    """Initial acquisition followed by segment tracking."""
    est = estimate_offset(a, b, search_span_s, coarse_bin_s, probe_s=probe_s, threshold=threshold,
                          max_drift=max_drift, window_s=window_s)
    half = max(20e-9, 4 * max_drift * segment_s)
    sol = track_drift(a, b, est, segment_s, half_s=half, coarse_bin_s=coarse_bin_s,
                      threshold=threshold, window_s=window_s)
    return est, sol


def _greedy(cand_a: np.ndarray, cand_b: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Indices of accepted candidates under global greedy by (key, a, b)."""
    if cand_a.size == 0:
        return np.zeros(0, dtype=np.int64)
    ua, ca = np.unique(cand_a, return_counts=True)
    ub, cb = np.unique(cand_b, return_counts=True)
    multi_a = ua[ca > 1]
    multi_b = ub[cb > 1]
    contested = np.isin(cand_a, multi_a) | np.isin(cand_b, multi_b)
    accepted = list(np.flatnonzero(~contested))
    idx = np.flatnonzero(contested)
    if idx.size:
        order = idx[np.lexsort((cand_b[idx], cand_a[idx], key[idx]))]
        used_a: set[int] = set()
        used_b: set[int] = set()
        for c in order.tolist():
            ia, ib = int(cand_a[c]), int(cand_b[c])
            if ia in used_a or ib in used_b:
                continue
            used_a.add(ia)
            used_b.add(ib)
            accepted.append(c)
    return np.sort(np.asarray(accepted, dtype=np.int64))


def match_candidates(a_ticks: np.ndarray, b_mapped: np.ndarray, half_ticks: float,
                     b_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ``(alice, bob)`` index pairs with ``|b - a| <= half`` and residual ticks."""
    ca, cb = [], []
    for xi, ai in _iter_candidates(_as_i64(a_ticks), b_mapped, -half_ticks, half_ticks):
        cb.append(xi)
        ca.append(ai)
    if not ca:
        z = np.zeros(0, np.int64)
        return z, z, np.zeros(0)
    cand_a = np.concatenate(ca)
    cand_b = np.concatenate(cb)
    resid = b_mapped[cand_b] - _as_i64(a_ticks)[cand_a]
    return cand_a, cand_b + b_offset, resid


def find_coincidences(a: TagStream, b: TagStream, clock: ClockSolution,
                      window_s: float = DEFAULT_WINDOW_S) -> Coincidences:
    """One-to-one nearest matching within ``|residual| <= window/2``.

    Conflicts are resolved greedily over all candidates in order of
    ``|residual|``, ties going to the earlier Alice tag and then the earlier
    Bob tag. The output is sorted by Alice index.
    """
    if len(a) == 0 or len(b) == 0:
        return Coincidences()
    mapped = clock.to_alice_ticks(b.ticks)
    return _build_pairs(a, b, mapped, window_s)


def _build_pairs(a: TagStream, b: TagStream, mapped: np.ndarray, window_s: float,
                 b_offset: int = 0) -> Coincidences:
    half = 0.5 * window_s / TICK_S
    cand_a, cand_b, resid = match_candidates(a.ticks, mapped, half, b_offset)
    keep = _greedy(cand_a, cand_b, np.abs(resid))
    cand_a, cand_b, resid = cand_a[keep], cand_b[keep], resid[keep]
    order = np.lexsort((cand_b, cand_a))
    ia, ib = cand_a[order], cand_b[order]
    local_b = ib - b_offset
    return Coincidences(ia, ib, a.ticks[ia], b.ticks[local_b], a.channels[ia], b.channels[local_b],
                        resid[order] * TICK_S)


def brute_force_coincidences(a_ticks, b_mapped, window_s: float) -> set[tuple[int, int]]:
    """Quadratic reference matcher (tests and small inputs only).

    Forms the full ``len(a) x len(b)`` residual matrix, so it shares no
    search logic with :func:`find_coincidences`.
    """
    a_ticks = np.asarray(a_ticks, dtype=np.float64)
    b_mapped = np.asarray(b_mapped, dtype=np.float64)
    half = 0.5 * window_s / TICK_S
    r = np.abs(b_mapped[None, :] - a_ticks[:, None])
    ia, ib = np.nonzero(r <= half)
    order = np.lexsort((ib, ia, r[ia, ib]))
    used_a, used_b, out = set(), set(), set()
    for i, j in zip(ia[order].tolist(), ib[order].tolist()):
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.add((i, j))
    return out


def coincidence_histogram(a: TagStream, b: TagStream, clock: ClockSolution,
                          span_s: float = 40e-9, bin_s: float = 2 * TICK_S) -> CoincidenceHistogram:
    """Histogram of every (a, b) residual inside ``[-span/2, span/2)``."""
    if bin_s < TICK_S * (1 - 1e-9):
        raise ValueError("bin must be at least one tick")
    nbins = max(1, int(round(span_s / bin_s)))
    edges = (np.arange(nbins + 1) - nbins / 2) * bin_s
    counts = np.zeros(nbins, dtype=np.int64)
    if len(a) and len(b):
        mapped = clock.to_alice_ticks(b.ticks)
        a_i64 = _as_i64(a.ticks)
        lo, hi = edges[0] / TICK_S, edges[-1] / TICK_S
        for xi, ai in _iter_candidates(a_i64, mapped, lo, hi):
            r = (mapped[xi] - a_i64[ai]) * TICK_S
            idx = np.floor((r - edges[0]) / bin_s).astype(np.int64)
            idx = idx[(idx >= 0) & (idx < nbins)]
            counts += np.bincount(idx, minlength=nbins)
    return CoincidenceHistogram(bin_s, edges, counts)


def peak_positions(hist: CoincidenceHistogram, min_separation_s: float = 2e-9,
                   prominence_frac: float = 0.02) -> np.ndarray:
    """Centroids of the histogram's local maxima (central and side peaks)."""
    counts = hist.counts.astype(float)
    if counts.max() <= 0:
        return np.zeros(0)
    distance = max(1, int(min_separation_s / hist.bin_width_s))
    floor = np.median(counts)
    prominence = max(prominence_frac * (counts.max() - floor), 3 * math.sqrt(max(floor, 1.0)))
    idx, _ = signal.find_peaks(counts, distance=distance, prominence=prominence)
    centers = hist.centers_s
    half = max(1, distance // 3)
    out = []
    for p in idx:
        sl = slice(max(0, p - half), p + half + 1)
        w = np.clip(counts[sl] - floor, 0, None)
        out.append(float(np.dot(w, centers[sl]) / w.sum()) if w.sum() > 0 else centers[p])
    return np.asarray(out)


def peak_spacing(positions_s: np.ndarray) -> float:
    """Mean spacing of a comb of peaks (least-squares slope vs. peak order)."""
    pos = np.sort(np.asarray(positions_s))
    if pos.size < 2:
        raise ValueError("need at least two peaks")
    gaps = np.diff(pos)
    unit = np.median(gaps)
    order = np.concatenate([[0], np.cumsum(np.rint(gaps / unit))])
    return float(np.polyfit(order, pos, 1)[0])


def tag_phases(ticks: np.ndarray, period_s: float = PULSE_PERIOD_S) -> np.ndarray:
    """Phase of each tag within the pulse period, in seconds ``[0, period)``."""
    cycles = np.asarray(ticks).astype(np.float64) * (TICK_S / period_s)
    return (cycles - np.floor(cycles)) * period_s


def estimate_pulse_phase(ticks: np.ndarray, period_s: float = PULSE_PERIOD_S, *,
                         n_bins: int = 32, max_samples: int = 1_000_000, p_value: float = 1e-6) -> float:
    """Phase of the pulse comb seen in a tag stream.

    Raises :class:`NoPulseStructureError` when a chi-square test cannot
    reject a flat phase histogram at ``p_value``.
    """
    ticks = np.asarray(ticks)
    if ticks.size > max_samples:
        ticks = ticks[:: int(math.ceil(ticks.size / max_samples))]
    if ticks.size < 2 * n_bins:
        raise NoPulseStructureError(f"only {ticks.size} tags, too few to see pulse structure")
    phase = tag_phases(ticks, period_s)
    hist = np.bincount(np.minimum((phase / period_s * n_bins).astype(np.int64), n_bins - 1), minlength=n_bins)
    p = stats.chisquare(hist).pvalue
    if not p < p_value:
        raise NoPulseStructureError(f"phase histogram is flat (chi-square p = {p:.3g})")
    angle = 2 * np.pi * phase / period_s
    mean = math.atan2(np.sin(angle).mean(), np.cos(angle).mean())
    return (mean / (2 * np.pi) % 1.0) * period_s


def pulse_gate(pairs: Coincidences, period_s: float = PULSE_PERIOD_S, gate_width_s: float = 0.8e-9,
               phase_s: float | None = None, reference: np.ndarray | None = None) -> tuple[Coincidences, float]:
    """Keep pairs whose Alice tag lies within ``gate_width/2`` of the pulse phase.

    The phase is estimated from ``reference`` ticks (typically the whole
    Alice stream) or, failing that, from the pairs themselves. Returns the
    gated pairs and the phase used.
    """
    if period_s <= 0 or gate_width_s <= 0:
        raise ValueError("period and gate width must be positive")
    if gate_width_s >= period_s:
        return pairs, 0.0 if phase_s is None else phase_s
    if phase_s is None:
        phase_s = estimate_pulse_phase(pairs.alice_tick if reference is None else reference, period_s)
    d = tag_phases(pairs.alice_tick, period_s) - phase_s
    d = (d + 0.5 * period_s) % period_s - 0.5 * period_s
    return pairs.take(np.abs(d) <= 0.5 * gate_width_s), phase_s
