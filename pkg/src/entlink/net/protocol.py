"""Framed byte protocol for shipping time tags from Bob to Alice.

Every frame starts with a 12-byte little-endian header::

    offset  size  field
    0       4     magic b"ELNK"
    4       2     version (u16, currently 1)
    6       1     frame type (u8)
    7       1     flags (u8, reserved, 0)
    8       4     payload length (u32)

Payloads (all little-endian):

    HELLO       u8 party, u8 reserved, u16 reserved, u64 start_s, u32 start_ns, u64 resume_seq
    EPOCH_SYNC  u64 epoch_s, u32 epoch_ns
    TAG_BATCH   u64 batch_seq, then count * u64 packed tags (count <= 65535)
    STATS       u64 tags_sent, u64 drops, u64 live_rate_millicps, u64 retransmissions
    BYE         u64 total_tags, u64 total_batches
    ACK         u64 next_expected_seq
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"ELNK"
VERSION = 1
HEADER = struct.Struct("<4sHBBI")
HEADER_SIZE = HEADER.size  # 12
MAX_BATCH_TAGS = 65535
MAX_PAYLOAD = 8 + 8 * MAX_BATCH_TAGS


class FrameType(IntEnum):
    HELLO = 1
    EPOCH_SYNC = 2
    TAG_BATCH = 3
    STATS = 4
    BYE = 5
    ACK = 6


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes = b""
    flags: int = 0

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, int(self.type), self.flags, len(self.payload)) + self.payload


class FrameDecoder:
    """Incremental decoder; accepts arbitrary byte fragments."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER_SIZE:
            magic, version, ftype, flags, length = HEADER.unpack_from(self._buf)
            if magic != MAGIC:
                raise ProtocolError(f"bad frame magic {bytes(magic)!r}")
            if version != VERSION:
                raise ProtocolError(f"unsupported protocol version {version}")
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"payload of {length} bytes exceeds the limit")
            try:
                kind = FrameType(ftype)
            except ValueError:
                raise ProtocolError(f"unknown frame type {ftype}") from None
            if len(self._buf) < HEADER_SIZE + length:
                break
            payload = bytes(self._buf[HEADER_SIZE:HEADER_SIZE + length])
            del self._buf[:HEADER_SIZE + length]
            frames.append(Frame(kind, payload, flags))
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


_HELLO = struct.Struct("<BBHQIQ")
_EPOCH = struct.Struct("<QI")
_SEQ = struct.Struct("<Q")
_STATS = struct.Struct("<QQQQ")
_BYE = struct.Struct("<QQ")


@dataclass(frozen=True)
class Hello:
    party: int
    start_s: int
    start_ns: int
    resume_seq: int = 0

    @property
    def start_time(self) -> float:
        return self.start_s + self.start_ns * 1e-9


@dataclass(frozen=True)
class Stats:
    tags_sent: int = 0
    drops: int = 0
    live_rate_millicps: int = 0
    retransmissions: int = 0

    @property
    def live_rate_cps(self) -> float:
        return self.live_rate_millicps / 1000.0


def _expect(frame: Frame, kind: FrameType, size: int | None = None) -> None:
    if frame.type != kind:
        raise ProtocolError(f"expected {kind.name}, got {frame.type.name}")
    if size is not None and len(frame.payload) != size:
        raise ProtocolError(f"{kind.name} payload must be {size} bytes, got {len(frame.payload)}")


def hello_frame(h: Hello) -> Frame:
    return Frame(FrameType.HELLO, _HELLO.pack(h.party, 0, 0, h.start_s, h.start_ns, h.resume_seq))


def parse_hello(frame: Frame) -> Hello:
    _expect(frame, FrameType.HELLO, _HELLO.size)
    party, _, _, s, ns, seq = _HELLO.unpack(frame.payload)
    return Hello(party, s, ns, seq)


def epoch_frame(epoch_s: int, epoch_ns: int = 0) -> Frame:
    return Frame(FrameType.EPOCH_SYNC, _EPOCH.pack(epoch_s, epoch_ns))


def parse_epoch(frame: Frame) -> tuple[int, int]:
    _expect(frame, FrameType.EPOCH_SYNC, _EPOCH.size)
    return _EPOCH.unpack(frame.payload)


def tag_batch_frame(seq: int, words: np.ndarray) -> Frame:
    words = np.asarray(words, dtype=np.uint64)
    if words.size > MAX_BATCH_TAGS:
        raise ProtocolError(f"batch of {words.size} tags exceeds {MAX_BATCH_TAGS}")
    ticks = words & np.uint64((1 << 60) - 1)
    if ticks.size > 1 and np.any(ticks[1:] < ticks[:-1]):
        raise ProtocolError("tag batch must be sorted")
    return Frame(FrameType.TAG_BATCH, _SEQ.pack(seq) + words.astype("<u8").tobytes())


def parse_tag_batch(frame: Frame) -> tuple[int, np.ndarray]:
    _expect(frame, FrameType.TAG_BATCH)
    body = len(frame.payload) - _SEQ.size
    if body < 0 or body % 8:
        raise ProtocolError("TAG_BATCH payload is not a sequence number plus whole tags")
    if body // 8 > MAX_BATCH_TAGS:
        raise ProtocolError("TAG_BATCH holds too many tags")
    (seq,) = _SEQ.unpack_from(frame.payload)
    words = np.frombuffer(frame.payload, dtype="<u8", offset=_SEQ.size).astype(np.uint64)
    return seq, words


def stats_frame(s: Stats) -> Frame:
    return Frame(FrameType.STATS, _STATS.pack(s.tags_sent, s.drops, s.live_rate_millicps, s.retransmissions))


def parse_stats(frame: Frame) -> Stats:
    _expect(frame, FrameType.STATS, _STATS.size)
    return Stats(*_STATS.unpack(frame.payload))


def bye_frame(total_tags: int, total_batches: int) -> Frame:
    return Frame(FrameType.BYE, _BYE.pack(total_tags, total_batches))


def parse_bye(frame: Frame) -> tuple[int, int]:
    _expect(frame, FrameType.BYE, _BYE.size)
    return _BYE.unpack(frame.payload)


def ack_frame(next_seq: int) -> Frame:
    return Frame(FrameType.ACK, _SEQ.pack(next_seq))


def parse_ack(frame: Frame) -> int:
    _expect(frame, FrameType.ACK, _SEQ.size)
    return _SEQ.unpack(frame.payload)[0]
