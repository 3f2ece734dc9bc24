"""Offline analysis of a recorded pair of tag streams."""
from __future__ import annotations

from dataclasses import dataclass

from .bell import ChshResult, Correlation, Tally, bell_csv, bell_report, chsh_from_tally, tally_coincidences
from .qkd import QkdResult, run_qkd
from .scenario import AnalysisConfig, Scenario
from .sync import (
    PULSE_PERIOD_S,
    ClockSolution,
    Coincidences,
    OffsetEstimate,
    find_coincidences,
    pulse_gate,
    synchronize,
)
from .timetag import TagStream


@dataclass
class SyncedPairs:
    estimate: OffsetEstimate
    clock: ClockSolution
    pairs: Coincidences
    ungated: Coincidences
    gate_phase_s: float | None
    duration_s: float

    @property
    def rate_cps(self) -> float:
        return len(self.pairs) / self.duration_s if self.duration_s > 0 else 0.0

    def sync_report(self) -> str:
        est = self.estimate
        return (
            f"offset_s = {est.offset_s:.12f} (confidence {est.confidence:.2f})\n"
            f"drift = {self.clock.drift:.3e}\n"
            f"knots = {len(self.clock.knots_t_s)}\n"
            f"coincidences = {len(self.pairs)} ({self.rate_cps:.2f} cps)\n"
        )


def extract_pairs(a: TagStream, b: TagStream, cfg: AnalysisConfig = AnalysisConfig(),
                  window_s: float | None = None, gating: bool | None = None) -> SyncedPairs:
    """Synchronise, match within the window and optionally pulse-gate."""
    window = cfg.window_s if window_s is None else window_s
    est, clock = synchronize(a, b, search_span_s=cfg.search_span_s, coarse_bin_s=cfg.coarse_bin_s,
                             probe_s=cfg.probe_s, segment_s=cfg.segment_s, window_s=window)
    raw = find_coincidences(a, b, clock, window)
    return gate_pairs(est, clock, raw, a, b, cfg, gating)


def gate_pairs(est: OffsetEstimate, clock: ClockSolution, raw: Coincidences, a: TagStream, b: TagStream,
               cfg: AnalysisConfig, gating: bool | None = None) -> SyncedPairs:
    gating = cfg.pulse_gating if gating is None else gating
    pairs, phase = raw, None
    if gating:
        pairs, phase = pulse_gate(raw, PULSE_PERIOD_S, cfg.gate_width_s, reference=a.ticks)
    duration = b.duration_s if len(b) else 0.0
    return SyncedPairs(est, clock, pairs, raw, phase, duration)


@dataclass
class BellAnalysis:
    tally: Tally
    correlations: list[Correlation]
    result: ChshResult
    settings: tuple[float, float, float, float]

    def report(self) -> str:
        return bell_report(self.tally, self.correlations, self.result, self.settings)

    def csv(self) -> str:
        return bell_csv(self.tally, self.correlations, self.settings)


def bell_analysis(pairs: Coincidences, scenario: Scenario) -> BellAnalysis:
    a_ang, b_ang = scenario.alice.analyzer.angles, scenario.bob.analyzer.angles
    settings = (a_ang[0], a_ang[1], b_ang[0], b_ang[1])
    tally = tally_coincidences(pairs, scenario.setting_map)
    corr, res = chsh_from_tally(tally, settings)
    return BellAnalysis(tally, corr, res, settings)


def qkd_analysis(pairs: Coincidences, scenario: Scenario, seed: int | None = None) -> QkdResult:
    cfg = scenario.analysis
    return run_qkd(pairs, qber_mode=cfg.qber_mode, sample_fraction=cfg.qber_sample_fraction,
                   passes=cfg.cascade_passes, security_param=cfg.security_param,
                   seed=scenario.seed if seed is None else seed)
