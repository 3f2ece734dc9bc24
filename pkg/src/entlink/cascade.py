"""Cascade reconciliation over a logged public channel.

Alice holds the reference key and only ever answers parity queries; Bob
drives the protocol and corrects his copy. Every answered query is one
disclosed bit, recorded in the transcript. Parities Bob can already infer
(a block's parity once its left half is known) are never asked for.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

K1_FACTOR = 0.73
MAX_QBER_HINT = 0.15


@dataclass(frozen=True)
class ParityQuery:
    pass_index: int
    start: int
    stop: int
    parity: int


@dataclass
class ReconciliationTranscript:
    passes: int
    block_sizes: list[int]
    shuffle_seeds: list[int]
    queries: list[ParityQuery] = field(default_factory=list)
    corrections: list[int] = field(default_factory=list)

    @property
    def parity_bits_disclosed(self) -> int:
        return len(self.queries)

    @property
    def blocks_corrected(self) -> int:
        return len(self.corrections)

    def recount(self) -> int:
        """Independent count of distinct disclosed parities."""
        return len({(q.pass_index, q.start, q.stop) for q in self.queries})

    def dump(self) -> str:
        lines = [f"passes {self.passes}", "block_sizes " + " ".join(map(str, self.block_sizes)),
                 "shuffle_seeds " + " ".join(map(str, self.shuffle_seeds))]
        lines += [f"parity {q.pass_index} {q.start} {q.stop} {q.parity}" for q in self.queries]
        lines += [f"flip {i}" for i in self.corrections]
        return "\n".join(lines) + "\n"


class ParityServer:
    """Alice's side of the public channel; answers and logs parity queries."""

    def __init__(self, key: np.ndarray, orders: list[np.ndarray], transcript: ReconciliationTranscript):
        self._prefix = [np.concatenate([[0], np.cumsum(key[o], dtype=np.int64)]) for o in orders]
        self._transcript = transcript
        self._seen: dict[tuple[int, int, int], int] = {}

    def parity(self, pass_index: int, start: int, stop: int) -> int:
        key = (pass_index, start, stop)
        if key not in self._seen:
            p = self._prefix[pass_index]
            self._seen[key] = int((p[stop] - p[start]) & 1)
            self._transcript.queries.append(ParityQuery(pass_index, start, stop, self._seen[key]))
        return self._seen[key]


def initial_block_size(qber_hint: float) -> int:
    return max(1, math.ceil(K1_FACTOR / qber_hint))


def cascade(alice: np.ndarray, bob: np.ndarray, qber_hint: float, passes: int = 4,
            seed: int = 0) -> tuple[np.ndarray, ReconciliationTranscript]:
    """Reconcile ``bob`` towards ``alice``; returns Bob's corrected key.

    Pass 1 uses blocks of ``ceil(0.73 / qber_hint)`` bits in the original
    order; each later pass doubles the block size and reads the key through
    a fresh seeded permutation. Every correction is propagated back through
    all earlier passes (the cascade step).
    """
    if not 0.0 < qber_hint < MAX_QBER_HINT:
        raise ValueError(f"qber_hint must lie in (0, {MAX_QBER_HINT}), got {qber_hint}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    alice = np.asarray(alice, dtype=np.uint8)
    bob = np.array(bob, dtype=np.uint8)
    if alice.shape != bob.shape:
        raise ValueError("keys differ in length")
    n = alice.size
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(passes)]
    k1 = initial_block_size(qber_hint)
    sizes = [min(max(n, 1), k1 * 2**p) for p in range(passes)]
    orders = [np.arange(n)] + [np.random.default_rng(s).permutation(n) for s in seeds[1:]]
    transcript = ReconciliationTranscript(passes, sizes, seeds)
    if n == 0:
        return bob, transcript
    server = ParityServer(alice, orders, transcript)

    # where[p][i] = position of key bit i in pass p's order
    where = [np.argsort(o) for o in orders]
    mismatch: list[np.ndarray] = []

    def bob_parity(p: int, start: int, stop: int) -> int:
        return int(bob[orders[p][start:stop]].sum() & 1)

    def bisect(p: int, start: int, stop: int) -> int:
        # the block [start, stop) has odd Alice/Bob parity difference
        while stop - start > 1:
            mid = (start + stop + 1) // 2
            if server.parity(p, start, mid) != bob_parity(p, start, mid):
                stop = mid
            else:
                start = mid
        return int(orders[p][start])

    def flip(bit: int, done: int, queue: deque) -> None:
        bob[bit] ^= 1
        transcript.corrections.append(bit)
        for q in range(done):
            blk = where[q][bit] // sizes[q]
            mismatch[q][blk] ^= True
            if mismatch[q][blk]:
                queue.append((q, blk))

    for p in range(passes):
        size = sizes[p]
        n_blocks = -(-n // size)
        flags = np.zeros(n_blocks, dtype=bool)
        for blk in range(n_blocks):
            start, stop = blk * size, min(n, (blk + 1) * size)
            flags[blk] = server.parity(p, start, stop) != bob_parity(p, start, stop)
        mismatch.append(flags)
        queue: deque = deque((p, int(b)) for b in np.flatnonzero(flags))
        while queue:
            q, blk = queue.popleft()
            if not mismatch[q][blk]:
                continue
            start, stop = blk * sizes[q], min(n, (blk + 1) * sizes[q])
            flip(bisect(q, start, stop), p + 1, queue)
    return bob, transcript
