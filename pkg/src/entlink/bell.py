"""Correlation coefficients, the CHSH parameter and its Poisson error."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .physics import CHSH_SIGNS
from .sync import Coincidences


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class SettingCounts:
    """Coincidence counts N_ij for one analyzer setting pair."""

    phi_a: float
    phi_b: float
    n_pp: int = 0
    n_pm: int = 0
    n_mp: int = 0
    n_mm: int = 0

    def __post_init__(self) -> None:
        if min(self.n_pp, self.n_pm, self.n_mp, self.n_mm) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_pp + self.n_pm + self.n_mp + self.n_mm


@dataclass(frozen=True)
class Correlation:
    e_value: float
    sigma: float

    def __post_init__(self) -> None:
        if abs(self.e_value) > 1.0 + 1e-12:
            raise ValueError(f"|E| = {abs(self.e_value)} exceeds 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class ChshResult:
    s_value: float
    sigma_s: float
    violation_sigmas: float

    @property
    def abs_s(self) -> float:
        return abs(self.s_value)


def correlation_coefficient(c: SettingCounts) -> Correlation:
    """E = (N++ + N-- - N+- - N-+) / N with first-order Poisson error.

    With every cell non-zero the error is sqrt((1 - E^2) / N). If a cell is
    empty the error is propagated cell by cell instead (for Poisson counts
    the two expressions coincide algebraically).
    """
    n = c.total
    if n <= 0:
        raise UndefinedCorrelationError(f"no coincidences at setting ({c.phi_a}, {c.phi_b})")
    same = c.n_pp + c.n_mm
    diff = c.n_pm + c.n_mp
    e = (same - diff) / n
    if min(c.n_pp, c.n_pm, c.n_mp, c.n_mm) > 0:
        sigma = math.sqrt(max(0.0, 1.0 - e * e) / n)
    else:
        # dE/dN_same = 2 diff / N^2, dE/dN_diff = -2 same / N^2
        var = (2 * diff / n**2) ** 2 * same + (2 * same / n**2) ** 2 * diff
        sigma = math.sqrt(var)
    return Correlation(e, sigma)


def chsh_s(e1: Correlation, e2: Correlation, e3: Correlation, e4: Correlation,
           sign_pattern: Sequence[int] = CHSH_SIGNS) -> ChshResult:
    """S = s1 E1 + s2 E2 + s3 E3 + s4 E4 with errors added in quadrature.

    The default pattern is E(a, b) - E(a, b') + E(a', b) + E(a', b').
    """
    if len(sign_pattern) != 4 or any(s not in (1, -1) for s in sign_pattern):
        raise ValueError("sign pattern must be four entries of +1/-1")
    es = (e1, e2, e3, e4)
    s = float(sum(sg * e.e_value for sg, e in zip(sign_pattern, es)))
    sigma = math.sqrt(sum(e.sigma**2 for e in es))
    violation = (abs(s) - 2.0) / sigma if sigma > 0 else (math.inf if abs(s) > 2 else -math.inf)
    return ChshResult(s, sigma, violation)


@dataclass(frozen=True)
class Tally:
    settings: tuple[SettingCounts, ...]
    unmapped: int

    @property
    def total(self) -> int:
        return sum(s.total for s in self.settings) + self.unmapped


def _cell(ch_a: np.ndarray, ch_b: np.ndarray) -> np.ndarray:
    # outcome bit 0 is '+', 1 is '-'; cell index: ++ 0, +- 1, -+ 2, -- 3
    return 2 * (ch_a & 1) + (ch_b & 1)


def tally_coincidences(pairs: Coincidences,
                       setting_map: Mapping[tuple[int, int], tuple[float, float]]) -> Tally:
    """Bin pairs by the basis combination realising each analyzer setting.

    ``setting_map`` maps ``(alice_basis, bob_basis)`` to ``(phi_a, phi_b)``.
    Pairs whose basis combination is not mapped, or whose channel id is
    outside the four polarisation channels, are counted as unmapped.
    """
    ch_a = pairs.alice_channel.astype(np.int64)
    ch_b = pairs.bob_channel.astype(np.int64)
    valid = (ch_a < 4) & (ch_b < 4)
    combo = np.where(valid, 2 * (ch_a >> 1) + (ch_b >> 1), -1)
    cells = _cell(ch_a, ch_b)
    out = []
    mapped = 0
    for (ba, bb), (pa, pb) in sorted(setting_map.items()):
        sel = combo == 2 * ba + bb
        n = np.bincount(cells[sel], minlength=4)
        mapped += int(sel.sum())
        out.append(SettingCounts(pa, pb, int(n[0]), int(n[1]), int(n[2]), int(n[3])))
    return Tally(tuple(out), len(pairs) - mapped)


def chsh_from_tally(tally: Tally, settings: Sequence[float],
                    sign_pattern: Sequence[int] = CHSH_SIGNS) -> tuple[list[Correlation], ChshResult]:
    """Evaluate S for settings ``(phi_a, phi_a', phi_b, phi_b')``."""
    a, a2, b, b2 = settings
    by_angle = {(s.phi_a, s.phi_b): s for s in tally.settings}
    order = [(a, b), (a, b2), (a2, b), (a2, b2)]
    try:
        corr = [correlation_coefficient(by_angle[k]) for k in order]
    except KeyError as exc:
        raise UndefinedCorrelationError(f"setting {exc.args[0]} missing from tally") from None
    return corr, chsh_s(*corr, sign_pattern=sign_pattern)


def bell_csv(tally: Tally, correlations: Sequence[Correlation], settings: Sequence[float]) -> str:
    a, a2, b, b2 = settings
    order = [(a, b), (a, b2), (a2, b), (a2, b2)]
    by_angle = {(s.phi_a, s.phi_b): s for s in tally.settings}
    rows = ["setting,E,sigma,counts"]
    for (pa, pb), c in zip(order, correlations):
        sc = by_angle[(pa, pb)]
        rows.append(f"{pa:g}/{pb:g},{c.e_value:.6f},{c.sigma:.6f},{sc.n_pp} {sc.n_pm} {sc.n_mp} {sc.n_mm}")
    return "\n".join(rows) + "\n"


def bell_report(tally: Tally, correlations: Sequence[Correlation], result: ChshResult,
                settings: Sequence[float]) -> str:
    a, a2, b, b2 = settings
    order = [(a, b), (a, b2), (a2, b), (a2, b2)]
    head = "".join(f"  E({pa:g},{pb:g})" .ljust(16) for pa, pb in order)
    vals = "".join(f"  {c.e_value:+.3f}+-{c.sigma:.3f}".ljust(16) for c in correlations)
    lines = [
        head.rstrip(),
        vals.rstrip(),
        f"S = {result.s_value:+.3f} +- {result.sigma_s:.3f}   |S| = {result.abs_s:.3f}",
        f"violation = {result.violation_sigmas:.1f} sigma",
        f"coincidences = {tally.total} (unmapped {tally.unmapped})",
    ]
    return "\n".join(lines) + "\n"
