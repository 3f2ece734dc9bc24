"""Entanglement-based key distillation from a coincidence record.

Sifting keeps pairs measured in the same basis; error correction is
Cascade; privacy amplification is Toeplitz hashing with the asymptotic
length bound. ``run_qkd`` composes the steps and never returns differing
final keys: mismatches surface as ``residual_error``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import MAX_QBER_HINT, ReconciliationTranscript, cascade
from .privacy import (
    KeyExhaustedError,
    KeyLedger,
    SecretKey,
    binary_entropy,
    final_key_length,
    privacy_amplification,
)
from .sync import Coincidences

__all__ = [
    "RawKeyPair", "QkdResult", "sift", "estimate_qber", "run_qkd", "binary_entropy",
    "KeyExhaustedError", "final_key_length",
]

MIN_QBER_HINT = 1e-3


class EmptyKeyError(ValueError):
    pass


@dataclass(frozen=True)
class RawKeyPair:
    alice: np.ndarray
    bob: np.ndarray
    basis: np.ndarray
    source_index: np.ndarray

    def __post_init__(self) -> None:
        if not (self.alice.shape == self.bob.shape == self.basis.shape == self.source_index.shape):
            raise ValueError("raw key arrays must have equal length")

    def __len__(self) -> int:
        return int(self.alice.size)

    @property
    def errors(self) -> int:
        return int(np.count_nonzero(self.alice != self.bob))

    def take(self, index) -> "RawKeyPair":
        return RawKeyPair(self.alice[index], self.bob[index], self.basis[index], self.source_index[index])


def sift(pairs: Coincidences) -> RawKeyPair:
    """Keep same-basis pairs. Bit 0 for H and +45, 1 for V and -45; Bob's
    bit is inverted because the singlet is anticorrelated."""
    ch_a = pairs.alice_channel.astype(np.uint8)
    ch_b = pairs.bob_channel.astype(np.uint8)
    keep = ((ch_a >> 1) == (ch_b >> 1)) & (ch_a < 4) & (ch_b < 4)
    idx = np.flatnonzero(keep)
    return RawKeyPair(ch_a[idx] & 1, (ch_b[idx] & 1) ^ 1, ch_a[idx] >> 1, idx.astype(np.int64))


def estimate_qber(raw: RawKeyPair, mode: str = "oracle", fraction: float = 0.5,
                  seed: int = 0) -> tuple[float, int, RawKeyPair]:
    """Returns ``(qber, bits_disclosed, remaining_key)``.

    ``oracle`` compares every bit using simulation truth and discloses
    nothing. ``sampled`` publishes a random ``fraction`` of the bits, which
    are then removed from the key.
    """
    if len(raw) == 0:
        raise EmptyKeyError("cannot estimate the QBER of an empty key")
    if mode == "oracle":
        return raw.errors / len(raw), 0, raw
    if mode != "sampled":
        raise ValueError(f"unknown QBER mode {mode!r}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("sample fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(raw))))
    chosen = np.zeros(len(raw), dtype=bool)
    chosen[rng.choice(len(raw), size=k, replace=False)] = True
    sample = raw.take(chosen)
    return sample.errors / k, k, raw.take(~chosen)


@dataclass
class QkdResult:
    raw: RawKeyPair
    n_coincidences: int
    qber: float
    sampled_bits: int
    transcript: ReconciliationTranscript | None
    residual_error: bool
    ledger: KeyLedger | None
    alice_key: SecretKey | None
    bob_key: SecretKey | None
    exhausted: str | None = None

    @property
    def sift_fraction(self) -> float:
        return len(self.raw) / self.n_coincidences if self.n_coincidences else 0.0

    @property
    def disclosed(self) -> int:
        return self.transcript.parity_bits_disclosed if self.transcript else 0

    @property
    def final_length(self) -> int:
        return self.alice_key.length if self.alice_key else 0

    @property
    def keys_identical(self) -> bool:
        return (self.alice_key is not None and self.bob_key is not None
                and np.array_equal(self.alice_key.bits, self.bob_key.bits))

    def report(self) -> str:
        lines = [
            f"coincidences = {self.n_coincidences}",
            f"raw_key_bits = {len(self.raw)}",
            f"sift_fraction = {self.sift_fraction:.4f}",
            f"qber = {self.qber:.4f}",
            f"qber_sample_bits = {self.sampled_bits}",
            f"disclosed = {self.disclosed}",
            f"residual_error = {str(self.residual_error).lower()}",
        ]
        if self.exhausted:
            lines.append(f"final_key_bits = 0 ({self.exhausted})")
        else:
            lines.append(f"final_key_bits = {self.final_length}")
            lines.append(f"keys_identical = {str(self.keys_identical).lower()}")
        return "\n".join(lines) + "\n"


def run_qkd(pairs: Coincidences, *, qber_mode: str = "oracle", sample_fraction: float = 0.5,
            passes: int = 4, security_param: int = 30, seed: int = 0) -> QkdResult:
    """Sift, estimate the QBER, reconcile and amplify.

    Residual errors after Cascade are detected by comparing the keys
    directly (simulation truth); in that case no final key is produced.
    """
    raw = sift(pairs)
    s_qber, s_cascade, s_pa = np.random.SeedSequence(seed).generate_state(3)
    if len(raw) == 0:
        return QkdResult(raw, len(pairs), 0.0, 0, None, False, None, None, None, "empty raw key")
    qber, sampled, key = estimate_qber(raw, qber_mode, sample_fraction, int(s_qber))
    hint = min(max(qber, MIN_QBER_HINT), MAX_QBER_HINT - 1e-3)
    corrected, transcript = cascade(key.alice, key.bob, hint, passes, int(s_cascade))
    residual = not np.array_equal(corrected, key.alice)
    ledger = KeyLedger(len(raw), len(key), qber, binary_entropy(min(qber, 0.5)),
                       transcript.parity_bits_disclosed, security_param, sampled)
    if residual:
        return QkdResult(raw, len(pairs), qber, sampled, transcript, True, ledger, None, None,
                         "residual errors after reconciliation")
    try:
        a_key = privacy_amplification(key.alice, ledger, int(s_pa))
        b_key = privacy_amplification(corrected, ledger, int(s_pa))
    except KeyExhaustedError as exc:
        return QkdResult(raw, len(pairs), qber, sampled, transcript, False, ledger, None, None, str(exc))
    return QkdResult(raw, len(pairs), qber, sampled, transcript, False, ledger, a_key, b_key)
