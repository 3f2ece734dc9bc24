"""Scenario files: a TOML description of one simulated run plus its analysis.

Schema (all tables optional unless noted; units in the key names)::

    name        = "paper-144km"      # required
    duration_s  = 221.0              # required, >= 0
    seed        = 144                # int >= 0
    epoch       = 1000000000         # integer GPS-style start second

    [source]     rep_rate_hz, pair_prob_per_pulse, local_coupling_eff, multi_pair
    [visibility] v_hv, v_diag
    [channel]    link_loss_db, background_cps_per_detector
    [channel.fading]  mean_loss_db, sigma_db, corr_time_s, tracking, drift_db_per_s
    [alice.detector] / [bob.detector]  efficiency, dark_cps, jitter_sigma_s, dead_time_s
    [alice.clock] / [bob.clock]        offset_s, drift_rate, gps_correction
    [alice.analyzer] / [bob.analyzer]  angles = [basis0_deg, basis1_deg]
    [analysis]   window_s, pulse_gating, gate_width_s, search_span_s, coarse_bin_s,
                 segment_s, probe_s, security_param, cascade_passes, qber_mode,
                 qber_sample_fraction

Unknown keys and out-of-range values raise :class:`ScenarioError` carrying
the line number of the offending entry.
"""
from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .linksim import (
    AnalyzerConfig,
    ChannelConfig,
    ClockConfig,
    DetectorConfig,
    FadingModel,
    PartyConfig,
    SourceConfig,
)
from .physics import SingletModel, VisibilityModel

BUNDLED = ("paper-144km", "paper-qkd")


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


@dataclass(frozen=True)
class AnalysisConfig:
    window_s: float = 0.8e-9
    pulse_gating: bool = True
    gate_width_s: float = 0.8e-9
    search_span_s: float = 2e-3
    coarse_bin_s: float = 1e-9
    segment_s: float = 10.0
    probe_s: float = 10.0
    security_param: int = 30
    cascade_passes: int = 4
    qber_mode: str = "oracle"
    qber_sample_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.window_s <= 0 or self.gate_width_s <= 0 or self.coarse_bin_s <= 0:
            raise ValueError("window_s, gate_width_s and coarse_bin_s must be positive")
        if self.search_span_s <= 0 or self.segment_s <= 0 or self.probe_s <= 0:
            raise ValueError("search_span_s, segment_s and probe_s must be positive")
        if self.qber_mode not in ("oracle", "sampled"):
            raise ValueError("qber_mode must be 'oracle' or 'sampled'")
        if not 0.0 < self.qber_sample_fraction < 1.0:
            raise ValueError("qber_sample_fraction must lie in (0, 1)")
        if self.cascade_passes < 1 or self.security_param < 0:
            raise ValueError("cascade_passes >= 1 and security_param >= 0 required")


@dataclass(frozen=True)
class Scenario:
    name: str
    duration_s: float
    seed: int = 0
    epoch: int = 1_000_000_000
    source: SourceConfig = SourceConfig()
    model: SingletModel = SingletModel()
    channel: ChannelConfig = ChannelConfig()
    alice: PartyConfig = PartyConfig()
    bob: PartyConfig = PartyConfig()
    analysis: AnalysisConfig = AnalysisConfig()

    def __post_init__(self) -> None:
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def replace(self, **changes: Any) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @property
    def setting_map(self) -> dict[tuple[int, int], tuple[float, float]]:
        """(alice basis, bob basis) -> (Phi_A, Phi_B)."""
        return {
            (i, j): (a, b)
            for i, a in enumerate(self.alice.analyzer.angles)
            for j, b in enumerate(self.bob.analyzer.angles)
        }


# table path -> {key: accepted python types}
_FLOAT, _INT, _BOOL, _STR = (float, int), (int,), (bool,), (str,)
_TABLES: dict[str, dict[str, tuple]] = {
    "": {"name": _STR, "duration_s": _FLOAT, "seed": _INT, "epoch": _INT},
    "source": {"rep_rate_hz": _FLOAT, "pair_prob_per_pulse": _FLOAT, "local_coupling_eff": _FLOAT, "multi_pair": _BOOL},
    "visibility": {"v_hv": _FLOAT, "v_diag": _FLOAT},
    "channel": {"link_loss_db": _FLOAT, "background_cps_per_detector": _FLOAT},
    "channel.fading": {"mean_loss_db": _FLOAT, "sigma_db": _FLOAT, "corr_time_s": _FLOAT, "tracking": _BOOL,
                       "drift_db_per_s": _FLOAT},
    "detector": {"efficiency": _FLOAT, "dark_cps": _FLOAT, "jitter_sigma_s": _FLOAT, "dead_time_s": _FLOAT},
    "clock": {"offset_s": _FLOAT, "drift_rate": _FLOAT, "gps_correction": _BOOL},
    "analyzer": {"angles": (list,)},
    "analysis": {
        "window_s": _FLOAT, "pulse_gating": _BOOL, "gate_width_s": _FLOAT, "search_span_s": _FLOAT,
        "coarse_bin_s": _FLOAT, "segment_s": _FLOAT, "probe_s": _FLOAT, "security_param": _INT,
        "cascade_passes": _INT, "qber_mode": _STR, "qber_sample_fraction": _FLOAT,
    },
}
_SUBTABLES = {"": {"source", "visibility", "channel", "alice", "bob", "analysis"},
              "channel": {"fading"}, "alice": {"detector", "clock", "analyzer"},
              "bob": {"detector", "clock", "analyzer"}}


class _Locator:
    """Maps (table path, key) to the 1-based line where the key is defined."""

    _header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\s\"]+?)\s*\]\s*(#.*)?$")
    _key = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")

    def __init__(self, text: str):
        self.lines: dict[tuple[str, str], int] = {}
        self.tables: dict[str, int] = {}
        table = ""
        for n, raw in enumerate(text.splitlines(), start=1):
            m = self._header.match(raw)
            if m:
                table = re.sub(r"\s+", "", m.group(1))
                self.tables.setdefault(table, n)
                continue
            m = self._key.match(raw)
            if m:
                self.lines.setdefault((table, m.group(1)), n)

    def line(self, table: str, key: str | None = None) -> int | None:
        if key is not None and (table, key) in self.lines:
            return self.lines[(table, key)]
        return self.tables.get(table)


def _schema_key(path: str) -> str:
    last = path.rsplit(".", 1)[-1]
    if path.startswith(("alice.", "bob.")):
        return last
    return path


def _check_table(data: dict, path: str, loc: _Locator, where: str | None) -> dict:
    spec = _TABLES.get(_schema_key(path))
    subs = _SUBTABLES.get(path, set())
    out: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            child = f"{path}.{key}" if path else key
            if key not in subs:
                raise ScenarioError(f"unknown table [{child}]", loc.line(child), where)
            continue
        if spec is None or key not in spec:
            shown = f"{path}.{key}" if path else key
            raise ScenarioError(f"unknown key '{shown}'", loc.line(path, key), where)
        types = spec[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if not ok:
            want = "/".join(t.__name__ for t in types)
            raise ScenarioError(f"'{key}' must be {want}, got {type(value).__name__}", loc.line(path, key), where)
        out[key] = float(value) if types == _FLOAT else value
    return out


def _build(ctor, kwargs: dict, path: str, loc: _Locator, where: str | None):
    try:
        return ctor(**kwargs)
    except (ValueError, TypeError) as exc:
        line = None
        for key in kwargs:
            if key in str(exc):
                line = loc.line(path, key)
                break
        if line is None and kwargs:
            line = loc.line(path, next(iter(kwargs)))
        if line is None:
            line = loc.line(path)
        raise ScenarioError(f"[{path or 'top level'}] {exc}", line, where) from None


def parse_scenario(text: str, where: str | None = None) -> Scenario:
    """Parse and validate scenario TOML text."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"syntax error: {exc}", int(m.group(1)) if m else None, where) from None
    loc = _Locator(text)

    top = _check_table(data, "", loc, where)
    for required in ("name", "duration_s"):
        if required not in top:
            raise ScenarioError(f"missing required key '{required}'", 1, where)

    def table(path: str) -> dict:
        node: Any = data
        for part in path.split("."):
            node = node.get(part, {}) if isinstance(node, dict) else {}
        return _check_table(node, path, loc, where) if node else {}

    source = _build(SourceConfig, {k: v for k, v in table("source").items()}, "source", loc, where)
    vis = _build(VisibilityModel, table("visibility"), "visibility", loc, where)
    fading_kw = table("channel.fading")
    fading = _build(FadingModel, fading_kw, "channel.fading", loc, where) if fading_kw else None
    channel = _build(ChannelConfig, {**table("channel"), "fading": fading}, "channel", loc, where)

    parties = {}
    for party in ("alice", "bob"):
        det = _build(DetectorConfig, table(f"{party}.detector"), f"{party}.detector", loc, where)
        clock = _build(ClockConfig, table(f"{party}.clock"), f"{party}.clock", loc, where)
        an_kw = table(f"{party}.analyzer")
        if "angles" in an_kw:
            angles = an_kw["angles"]
            if len(angles) != 2 or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in angles):
                raise ScenarioError("'angles' must be two numbers", loc.line(f"{party}.analyzer", "angles"), where)
            an_kw = {"angles": (float(angles[0]), float(angles[1]))}
        analyzer = _build(AnalyzerConfig, an_kw, f"{party}.analyzer", loc, where)
        parties[party] = PartyConfig(det, clock, analyzer)

    analysis = _build(AnalysisConfig, table("analysis"), "analysis", loc, where)
    return _build(
        Scenario,
        dict(top, source=source, model=SingletModel(vis), channel=channel,
             alice=parties["alice"], bob=parties["bob"], analysis=analysis),
        "", loc, where,
    )


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Load a bundled scenario by name or a scenario file by path."""
    path = Path(name_or_path)
    if str(name_or_path) in BUNDLED:
        text = resources.files("entlink.scenarios").joinpath(f"{name_or_path}.toml").read_text()
        return parse_scenario(text, f"{name_or_path}.toml")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}", None, str(path)) from None
    return parse_scenario(text, str(path))
