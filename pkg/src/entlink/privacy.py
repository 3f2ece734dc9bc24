"""Privacy amplification by Toeplitz hashing, plus the length bound."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal


class KeyExhaustedError(RuntimeError):
    """The length bound leaves no secret bits."""


def binary_entropy(q: float) -> float:
    """h2(q) = -q log2 q - (1 - q) log2 (1 - q), with h2(0) = h2(1) = 0."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if q in (0.0, 1.0):
        return 0.0
    return -q * math.log2(q) - (1 - q) * math.log2(1 - q)


@dataclass(frozen=True)
class KeyLedger:
    raw_bits: int
    key_bits: int
    qber: float
    entropy_bound: float
    disclosed: int
    security_param: int
    sampled_bits: int = 0

    @property
    def final_length(self) -> int:
        return final_key_length(self.key_bits, self.qber, self.disclosed, self.security_param)

    def dump(self) -> str:
        return (
            f"raw_bits = {self.raw_bits}\n"
            f"qber_sample_bits = {self.sampled_bits}\n"
            f"key_bits = {self.key_bits}\n"
            f"qber = {self.qber:.6f}\n"
            f"entropy_bound = {self.entropy_bound:.6f}\n"
            f"disclosed = {self.disclosed}\n"
            f"security_param = {self.security_param}\n"
        )


@dataclass(frozen=True)
class SecretKey:
    bits: np.ndarray
    ledger: KeyLedger
    seed: int

    @property
    def length(self) -> int:
        return int(self.bits.size)

    def hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex() if self.bits.size else ""


def final_key_length(n: int, qber: float, disclosed: int, security_param: int) -> int:
    """floor(n (1 - h2(q)) - disclosed - s); q above 1/2 is treated as 1/2."""
    return math.floor(n * (1.0 - binary_entropy(min(qber, 0.5))) - disclosed - security_param)


def toeplitz_hash(bits: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Multiply ``bits`` (length n) by an m x n binary Toeplitz matrix over GF(2).

    The matrix is ``T[i, j] = t[i - j + n - 1]`` with ``t`` the first
    ``n + m - 1`` bits drawn from ``seed``.
    """
    x = np.asarray(bits, dtype=np.uint8)
    n = x.size
    if m <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    t = np.random.default_rng(seed).integers(0, 2, size=n + m - 1, dtype=np.uint8)
    if n * m <= 1 << 24:
        full = np.convolve(t.astype(np.int64), x.astype(np.int64))
    else:
        full = np.rint(signal.fftconvolve(t.astype(np.float64), x.astype(np.float64))).astype(np.int64)
    return (full[n - 1:n - 1 + m] & 1).astype(np.uint8)


def privacy_amplification(bits: np.ndarray, ledger: KeyLedger, seed: int) -> SecretKey:
    m = ledger.final_length
    if m <= 0:
        raise KeyExhaustedError(
            f"key exhausted: {ledger.key_bits} bits at QBER {ledger.qber:.2%} minus "
            f"{ledger.disclosed} disclosed and s = {ledger.security_param} leaves {m}"
        )
    return SecretKey(toeplitz_hash(bits, m, seed), ledger, seed)
