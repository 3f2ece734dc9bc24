"""Singlet-state polarization correlations with imperfect visibility.

Analyzer angles are kept in degrees everywhere and only converted to
radians inside the trigonometric calls. Polarization analyzers are
pi-periodic, so every angle is folded into [0, 180).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "Basis",
    "Outcome",
    "VisibilityModel",
    "SingletModel",
    "normalize_angle",
    "effective_visibility",
    "joint_probability",
    "correlation_expectation",
    "ideal_chsh",
    "CANONICAL_SETTINGS",
    "CHSH_SIGNS",
]

_ANGLE_TOL = 1e-9

# (Phi_A, Phi'_A, Phi_B, Phi'_B) maximising |S|
CANONICAL_SETTINGS = (0.0, 45.0, 22.5, 67.5)
# S = E(a, b) - E(a, b') + E(a', b) + E(a', b')
CHSH_SIGNS = (1, -1, 1, 1)


class Outcome(Enum):
    PLUS = "+"
    MINUS = "-"

    @property
    def sign(self) -> int:
        return 1 if self is Outcome.PLUS else -1


class Basis(Enum):
    HV = 0
    DIAG = 1

    @property
    def angle(self) -> float:
        return 0.0 if self is Basis.HV else 45.0


def normalize_angle(degrees: float) -> float:
    """Fold an analyzer angle into [0, 180)."""
    folded = math.fmod(float(degrees), 180.0)
    if folded < 0:
        folded += 180.0
    # tiny negative inputs round up to exactly 180 above
    if folded >= 180.0:
        folded = 0.0
    return folded


@dataclass(frozen=True)
class VisibilityModel:
    v_hv: float = 1.0
    v_diag: float = 1.0

    def __post_init__(self) -> None:
        for name in ("v_hv", "v_diag"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class SingletModel:
    """Singlet source whose correlations are damped by a visibility model."""

    visibility: VisibilityModel = VisibilityModel()

    @classmethod
    def ideal(cls) -> "SingletModel":
        return cls(VisibilityModel(1.0, 1.0))

    @classmethod
    def uniform(cls, v: float) -> "SingletModel":
        return cls(VisibilityModel(v, v))


def _on_grid(angle: float, grid: Sequence[float]) -> bool:
    return any(abs(angle - g) < _ANGLE_TOL for g in grid)


def effective_visibility(model: SingletModel, a: float, b: float) -> float:
    """Visibility that applies to the analyzer pair (a, b).

    Basis-aligned settings use the measured visibility of that basis.
    Anything else uses the geometric mean of the two.
    """
    a, b = normalize_angle(a), normalize_angle(b)
    vis = model.visibility
    if _on_grid(a, (0.0, 90.0)) and _on_grid(b, (0.0, 90.0)):
        return vis.v_hv
    if _on_grid(a, (45.0, 135.0)) and _on_grid(b, (45.0, 135.0)):
        return vis.v_diag
    return math.sqrt(vis.v_hv * vis.v_diag)


def _outcome_sign(i: Outcome, j: Outcome) -> int:
    return 1 if i is j else -1


def joint_probability(model: SingletModel, a: float, b: float, i: Outcome, j: Outcome) -> float:
    """P(i, j | a, b) = 1/4 (1 - s_ij V cos 2(a - b)), s_ij = +1 if i == j."""
    v = effective_visibility(model, a, b)
    delta = math.radians(normalize_angle(a) - normalize_angle(b))
    return 0.25 * (1.0 - _outcome_sign(i, j) * v * math.cos(2.0 * delta))


def correlation_expectation(model: SingletModel, a: float, b: float) -> float:
    """E(a, b) = -V cos 2(a - b)."""
    v = effective_visibility(model, a, b)
    delta = math.radians(normalize_angle(a) - normalize_angle(b))
    return -v * math.cos(2.0 * delta)


def ideal_chsh(
    model: SingletModel,
    settings: Sequence[float] = CANONICAL_SETTINGS,
    signs: Sequence[int] = CHSH_SIGNS,
) -> float:
    """Signed CHSH value for settings (Phi_A, Phi'_A, Phi_B, Phi'_B)."""
    a, a2, b, b2 = settings
    e = (
        correlation_expectation(model, a, b),
        correlation_expectation(model, a, b2),
        correlation_expectation(model, a2, b),
        correlation_expectation(model, a2, b2),
    )
    return float(np.dot(signs, e))


def same_outcome_probability(v: np.ndarray, a_deg: np.ndarray, b_deg: np.ndarray) -> np.ndarray:
    """Vectorised P(i == j) = 1/2 (1 - V cos 2(a - b)), used by the simulator."""
    delta = np.radians(np.asarray(a_deg) - np.asarray(b_deg))
    return 0.5 * (1.0 - np.asarray(v) * np.cos(2.0 * delta))
