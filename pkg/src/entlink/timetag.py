"""64-bit time tags, tag streams and the ``.etag`` file format.

Word layout (little-endian u64)::

    bits 60..63  channel id (0..15; 0-3 = H, V, P, M)
    bits  0..59  tick count, 1 tick = 156 ps

File layout::

    offset  size  field
    0       4     magic b"ETAG"
    4       2     version (u16, currently 1)
    6       1     party (u8: 0 = Alice, 1 = Bob)
    7       1     reserved (0)
    8       8     epoch, integer GPS-style seconds (u64)
    16      8     tag count (u64)
    24      8*n   packed tags
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

TICK_S = 156e-12
TICK_BITS = 60
TICK_MASK = (1 << TICK_BITS) - 1
MAX_CHANNEL = 15
MAX_TIME_S = (1 << TICK_BITS) * TICK_S

MAGIC = b"ETAG"
VERSION = 1
HEADER = struct.Struct("<4sHBBQQ")
HEADER_SIZE = HEADER.size  # 24

ALICE = 0
BOB = 1
PARTY_NAMES = {ALICE: "alice", BOB: "bob"}

CHANNEL_NAMES = ("H", "V", "P", "M")

_U64_MASK = np.uint64(TICK_MASK)
_SHIFT = np.uint64(TICK_BITS)


class TagFormatError(ValueError):
    """Base class for malformed tag data."""


class BadMagicError(TagFormatError):
    pass


class TruncatedStreamError(TagFormatError):
    pass


class UnsortedStreamError(TagFormatError):
    pass


class UnsupportedVersionError(TagFormatError):
    pass


def encode(channel: int, time_s: float) -> int:
    """Pack one detection into a 64-bit word."""
    if not 0 <= channel <= MAX_CHANNEL:
        raise ValueError(f"channel {channel} outside 0..{MAX_CHANNEL}")
    if not 0.0 <= time_s < MAX_TIME_S:
        raise ValueError(f"time {time_s!r} s outside the representable range")
    tick = int(round(time_s / TICK_S))
    if tick > TICK_MASK:
        raise ValueError(f"time {time_s!r} s rounds past the last tick")
    return (channel << TICK_BITS) | tick


def decode(word: int) -> tuple[int, float]:
    """Inverse of :func:`encode`; returns ``(channel, time_s)``."""
    word = int(word)
    return word >> TICK_BITS, (word & TICK_MASK) * TICK_S


def seconds_to_ticks(times_s: np.ndarray) -> np.ndarray:
    """Vectorised tick rounding (round-half-even, like ``round``)."""
    times_s = np.asarray(times_s, dtype=np.float64)
    if times_s.size and (times_s.min() < 0.0 or times_s.max() >= MAX_TIME_S):
        raise ValueError("time outside the representable range")
    return np.rint(times_s / TICK_S).astype(np.uint64)


def pack(ticks: np.ndarray, channels: np.ndarray) -> np.ndarray:
    ticks = np.asarray(ticks, dtype=np.uint64)
    channels = np.asarray(channels, dtype=np.uint64)
    if channels.size and channels.max() > MAX_CHANNEL:
        raise ValueError("channel id above 15")
    if ticks.size and ticks.max() > TICK_MASK:
        raise ValueError("tick count exceeds 60 bits")
    return (channels << _SHIFT) | ticks


def unpack(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    words = np.asarray(words, dtype=np.uint64)
    return words & _U64_MASK, (words >> _SHIFT).astype(np.uint8)


@dataclass(eq=False)
class TagStream:
    """Time-ordered tags of one party.

    Ticks and channels are stored as separate arrays so that large streams
    can be searched without unpacking; :attr:`packed` rebuilds the words.
    """

    party: int
    epoch: int
    ticks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __post_init__(self) -> None:
        self.ticks = np.asarray(self.ticks, dtype=np.uint64)
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.ticks.shape != self.channels.shape or self.ticks.ndim != 1:
            raise ValueError("ticks and channels must be 1-d arrays of equal length")
        if self.party not in PARTY_NAMES:
            raise ValueError(f"unknown party {self.party}")
        if not 0 <= self.epoch < 1 << 64:
            raise ValueError("epoch must fit in u64")

    @classmethod
    def from_packed(cls, party: int, epoch: int, words: np.ndarray) -> "TagStream":
        ticks, channels = unpack(words)
        return cls(party, epoch, ticks, channels)

    @classmethod
    def from_times(cls, party: int, epoch: int, times_s, channels) -> "TagStream":
        return cls(party, epoch, seconds_to_ticks(times_s), np.asarray(channels, dtype=np.uint8))

    def __len__(self) -> int:
        return int(self.ticks.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.party == other.party
            and self.epoch == other.epoch
            and np.array_equal(self.ticks, other.ticks)
            and np.array_equal(self.channels, other.channels)
        )

    @property
    def packed(self) -> np.ndarray:
        return pack(self.ticks, self.channels)

    @property
    def times_s(self) -> np.ndarray:
        return self.ticks.astype(np.float64) * TICK_S

    @property
    def duration_s(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.ticks[-1] - self.ticks[0]) * TICK_S

    def validate(self, chunk: int = 1 << 22) -> None:
        """Raise :class:`UnsortedStreamError` unless ticks are non-decreasing
        and equal ticks only occur on different channels."""
        n = len(self)
        for start in range(0, max(n - 1, 0), chunk):
            stop = min(start + chunk + 1, n)
            t = self.ticks[start:stop]
            down = np.flatnonzero(t[1:] < t[:-1])
            if down.size:
                raise UnsortedStreamError(f"tag {start + down[0] + 1} precedes its predecessor")
            for i in np.flatnonzero(t[1:] == t[:-1]) + start:
                self._check_tie(int(i) + 1)

    def _check_tie(self, j: int) -> None:
        start = j - 1
        while start > 0 and self.ticks[start - 1] == self.ticks[j]:
            start -= 1
        if self.channels[j] in self.channels[start:j]:
            raise UnsortedStreamError(f"duplicate tag on channel {self.channels[j]} at index {j}")

    def slice_ticks(self, lo: int, hi: int) -> "TagStream":
        """Sub-stream with ``lo <= tick < hi``."""
        i, j = np.searchsorted(self.ticks, [lo, hi])
        return TagStream(self.party, self.epoch, self.ticks[i:j], self.channels[i:j])

    def count_by_channel(self, n: int = 4) -> np.ndarray:
        return np.bincount(self.channels, minlength=n)


def write_stream(stream: TagStream) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, stream.party, 0, stream.epoch, len(stream))
    return header + stream.packed.astype("<u8", copy=False).tobytes()


def read_stream(data: bytes) -> TagStream:
    if len(data) < HEADER_SIZE:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {data[:4]!r}")
        raise TruncatedStreamError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, party, _reserved, epoch, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if party not in PARTY_NAMES:
        raise TagFormatError(f"unknown party id {party}")
    need = HEADER_SIZE + 8 * count
    if len(data) < need:
        raise TruncatedStreamError(f"expected {count} tags ({need} bytes), got {len(data)} bytes")
    if len(data) > need:
        raise TagFormatError(f"{len(data) - need} trailing bytes after {count} tags")
    words = np.frombuffer(data, dtype="<u8", count=count, offset=HEADER_SIZE)
    stream = TagStream.from_packed(party, epoch, words.astype(np.uint64))
    stream.validate()
    return stream


def save(stream: TagStream, path, chunk: int = 1 << 22) -> None:
    """Write ``stream`` to ``path`` without materialising all packed words."""
    with open(path, "wb") as fh:
        _write_to(fh, stream, chunk)


def _write_to(fh: BinaryIO, stream: TagStream, chunk: int) -> None:
    fh.write(HEADER.pack(MAGIC, VERSION, stream.party, 0, stream.epoch, len(stream)))
    for start in range(0, len(stream), chunk):
        words = pack(stream.ticks[start:start + chunk], stream.channels[start:start + chunk])
        fh.write(words.astype("<u8", copy=False).tobytes())


def load(path, chunk: int = 1 << 22) -> TagStream:
    """Read an ``.etag`` file; large payloads are unpacked in chunks."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            return read_stream(head)
        magic, version, party, _reserved, epoch, count = HEADER.unpack(head)
        if magic != MAGIC or version != VERSION or count * 8 < (1 << 24):
            fh.seek(0)
            return read_stream(fh.read())
        fh.seek(0, 2)
        size = fh.tell()
    if size != HEADER_SIZE + 8 * count:
        raise TruncatedStreamError(f"expected {count} tags, file holds {(size - HEADER_SIZE) / 8:g}")
    words = np.memmap(path, dtype="<u8", mode="r", offset=HEADER_SIZE, shape=(count,))
    ticks = np.empty(count, dtype=np.uint64)
    channels = np.empty(count, dtype=np.uint8)
    for start in range(0, count, chunk):
        t, c = unpack(words[start:start + chunk])
        ticks[start:start + chunk] = t
        channels[start:start + chunk] = c
    del words
    stream = TagStream(party, epoch, ticks, channels)
    stream.validate()
    return stream
