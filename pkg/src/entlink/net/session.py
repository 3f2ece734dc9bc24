"""Two-node session: Bob streams tags, Alice synchronises and matches online.

Delivery is Go-Back-N over a reliable byte stream: Bob keeps a window of
unacknowledged TAG_BATCH frames, Alice acknowledges cumulatively and
discards anything out of order, and Bob resends from the oldest
unacknowledged batch on timeout. A dropped connection is resumed from the
sequence number Alice reports in her HELLO.

Alice runs ingestion (socket -> bounded queue) and extraction (queue ->
:class:`OnlineEngine`) on separate threads. When the queue is full the
ingestion thread blocks, which stalls the socket and so throttles Bob; no
batch is ever dropped or reordered on the receiving side.
"""
from __future__ import annotations

import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..analysis import SyncedPairs
from ..scenario import AnalysisConfig
from ..sync import (
    DEFAULT_THRESHOLD,
    PULSE_PERIOD_S,
    ClockSolution,
    Coincidences,
    DriftTracker,
    LockLostError,
    NoSignificantPeakError,
    OffsetEstimate,
    _as_i64,
    _build_pairs,
    _probe,
    estimate_pulse_phase,
    first_probe_s,
    may_extend_probe,
    pulse_gate,
)
from ..timetag import ALICE, BOB, TICK_S, TagStream, pack, unpack
from .protocol import (
    Frame,
    FrameDecoder,
    FrameType,
    Hello,
    ProtocolError,
    Stats,
    ack_frame,
    bye_frame,
    epoch_frame,
    hello_frame,
    parse_ack,
    parse_bye,
    parse_epoch,
    parse_hello,
    parse_stats,
    parse_tag_batch,
    stats_frame,
    tag_batch_frame,
)

log = logging.getLogger(__name__)

EPOCH_BOUND_S = 0.5
DEFAULT_BATCH = 4096


class NetworkError(RuntimeError):
    pass


class SessionTimeoutError(NetworkError):
    pass


class EpochDisagreementError(NetworkError):
    def __init__(self, delta_s: float, bound_s: float = EPOCH_BOUND_S):
        self.delta_s = delta_s
        self.bound_s = bound_s
        super().__init__(f"start times differ by {delta_s * 1e3:.0f} ms (bound {bound_s * 1e3:.0f} ms)")


@dataclass(frozen=True)
class HandshakeResult:
    agreed_epoch: int
    delta_s: float


def handshake(initiator_start_s: float, responder_start_s: float,
              bound_s: float = EPOCH_BOUND_S) -> HandshakeResult:
    """Agree on a start epoch (integer seconds) from both local start times."""
    delta = abs(initiator_start_s - responder_start_s)
    if delta > bound_s + 1e-9:
        raise EpochDisagreementError(delta, bound_s)
    return HandshakeResult(int(math.floor(min(initiator_start_s, responder_start_s))), delta)


def _split_time(t: float) -> tuple[int, int]:
    s = int(math.floor(t))
    return s, int(round((t - s) * 1e9))


# ---------------------------------------------------------------- online engine

class _Buffer:
    def __init__(self) -> None:
        self.ticks = np.zeros(1024, dtype=np.uint64)
        self.channels = np.zeros(1024, dtype=np.uint8)
        self.size = 0

    def extend(self, ticks: np.ndarray, channels: np.ndarray) -> None:
        need = self.size + ticks.size
        if need > self.ticks.size:
            cap = max(need, 2 * self.ticks.size)
            self.ticks = np.concatenate([self.ticks[: self.size], np.zeros(cap - self.size, np.uint64)])
            self.channels = np.concatenate([self.channels[: self.size], np.zeros(cap - self.size, np.uint8)])
        self.ticks[self.size:need] = ticks
        self.channels[self.size:need] = channels
        self.size = need

    def stream(self, epoch: int) -> TagStream:
        return TagStream(BOB, epoch, self.ticks[: self.size], self.channels[: self.size])


class OnlineEngine:
    """Incremental synchronisation and matching of Bob's arriving tags.

    Acquisition, segment tracking and matching use exactly the rules of the
    offline path, and pairs are only released once the clock curve over
    them is final, so the released pairs equal the offline result.
    """

    def __init__(self, alice: TagStream, cfg: AnalysisConfig = AnalysisConfig(), *,
                 window_s: float | None = None, gating: bool | None = None,
                 threshold: float = DEFAULT_THRESHOLD, max_drift: float = 1e-11, epoch: int | None = None):
        self.alice = alice
        self.cfg = cfg
        self.window_s = cfg.window_s if window_s is None else window_s
        self.gating = cfg.pulse_gating if gating is None else gating
        self.threshold = threshold
        self.max_drift = max_drift
        self.epoch = alice.epoch if epoch is None else epoch
        self.phase = "syncing"
        self.events: list[tuple[str, str]] = []
        self.estimate: OffsetEstimate | None = None
        self.tracker: DriftTracker | None = None
        self.error: Exception | None = None
        self._a = _as_i64(alice.ticks)
        self._b = _Buffer()
        self._probe_s = first_probe_s(cfg.probe_s, cfg.coarse_bin_s, max_drift)
        self._acquire_failed = False
        self._segment = 0
        self._done = 0
        self._raw: list[Coincidences] = []
        self._gated: list[Coincidences] = []
        self._gate_phase: float | None = None
        self._finished = False
        self._lock = threading.Lock()

    # state -----------------------------------------------------------------
    def _transition(self, phase: str, cause: str) -> None:
        if phase == "locked" and self.estimate is None:
            raise RuntimeError("cannot lock without an accepted offset estimate")
        if phase != self.phase:
            log.info("session %s -> %s: %s", self.phase, phase, cause)
            self.events.append((phase, cause))
            self.phase = phase

    @property
    def n_bob(self) -> int:
        return self._b.size

    @property
    def pairs(self) -> Coincidences:
        return Coincidences.concat(self._gated if self.gating else self._raw)

    @property
    def ungated(self) -> Coincidences:
        return Coincidences.concat(self._raw)

    @property
    def live_rate_cps(self) -> float:
        with self._lock:
            if self._done == 0:
                return 0.0
            span = (int(self._b.ticks[self._done - 1]) - int(self._b.ticks[0])) * TICK_S
            n = sum(len(c) for c in (self._gated if self.gating else self._raw))
        return n / span if span > 0 else 0.0

    def clock(self) -> ClockSolution | None:
        if self.tracker is None:
            return None
        return self.tracker.solution()

    # input -------------------------------------------------------------------
    def feed_words(self, words: np.ndarray) -> None:
        ticks, channels = unpack(words)
        self.feed(ticks, channels)

    def feed(self, ticks: np.ndarray, channels: np.ndarray) -> None:
        if self._finished:
            raise RuntimeError("engine already finished")
        ticks = np.asarray(ticks, dtype=np.uint64)
        if ticks.size and self._b.size and ticks[0] < self._b.ticks[self._b.size - 1]:
            raise ValueError("Bob tags arrived out of order")
        with self._lock:
            self._b.extend(ticks, np.asarray(channels, dtype=np.uint8))
        self._advance()

    def finish(self) -> None:
        self._finished = True
        self._advance()

    # processing --------------------------------------------------------------
    def _advance(self) -> None:
        if self._b.size == 0:
            return
        b = self._b.stream(self.epoch)
        if self.phase == "syncing":
            self._acquire(b)
        if self.phase in ("locked", "degraded"):
            self._track(b)
            self._emit(b)

    def _acquire(self, b: TagStream) -> None:
        if self._acquire_failed:
            return
        b0 = int(b.ticks[0])
        last = int(b.ticks[-1])
        while True:
            end = b0 + int(self._probe_s / TICK_S)
            if last < end and not self._finished:
                return  # probe window not yet complete
            b_end = int(np.searchsorted(b.ticks, np.uint64(end), side="left"))
            est = _probe(self._a, b.ticks[: max(b_end, 1)], self._probe_s, self.cfg.search_span_s,
                         self.cfg.coarse_bin_s, 0.0, self.max_drift, self.window_s)
            if est.confidence >= self.threshold:
                self.estimate = est
                half = max(20e-9, 4 * self.max_drift * self.cfg.segment_s)
                self.tracker = DriftTracker(est, half_s=half, coarse_bin_s=self.cfg.coarse_bin_s,
                                            threshold=self.threshold, window_s=self.window_s)
                self._transition("locked", f"offset {est.offset_s:.9e} s, confidence {est.confidence:.1f}")
                return
            if b_end >= len(b) or not may_extend_probe(self._probe_s, self.cfg.coarse_bin_s, self.max_drift):
                self.error = NoSignificantPeakError(est.confidence, self.threshold)
                self._acquire_failed = True  # as offline: no retry with other data
                return
            self._probe_s *= 2

    def _track(self, b: TagStream) -> None:
        seg = int(round(self.cfg.segment_s / TICK_S))
        b0, last = int(b.ticks[0]), int(b.ticks[-1])
        while True:
            k = self._segment
            lo, hi = b0 + k * seg, b0 + (k + 1) * seg
            if self._finished:
                if lo > last or (k > 0 and last - lo < seg // 2):
                    return
            elif last < hi:
                return
            try:
                self.tracker.add_segment(self._a, b, k, lo, hi, (lo + 0.5 * seg) * TICK_S)
                if self.phase == "degraded":
                    self._transition("locked", f"segment {k} re-acquired")
            except LockLostError as exc:
                # pairs stay suspended until a later segment locks again
                self.error = exc
                self._transition("degraded", str(exc))
            self._segment += 1

    def _emit(self, b: TagStream) -> None:
        if self.phase != "locked":
            return
        knots = self.tracker.knots_t
        if self._finished:
            clock = self.tracker.solution()
            stop = len(b)
        elif len(knots) >= 2:
            clock = ClockSolution(tuple(self.tracker.knots_t), tuple(self.tracker.knots_o))
            # tags up to the last knot are mapped by their final clock curve
            final = b.ticks[self._done:].astype(np.float64) * TICK_S <= knots[-1]
            limit = self._done + int(np.count_nonzero(final))
            stop = self._safe_cut(b, limit)
        else:
            return
        if stop <= self._done:
            return
        sl = slice(self._done, stop)
        part = TagStream(BOB, b.epoch, b.ticks[sl], b.channels[sl])
        mapped = clock.to_alice_ticks(part.ticks)
        raw = _build_pairs(self.alice, part, mapped, self.window_s, b_offset=self._done)
        gated = raw
        if self.gating and len(raw):
            if self._gate_phase is None:
                self._gate_phase = estimate_pulse_phase(self.alice.ticks, PULSE_PERIOD_S)
            gated, _ = pulse_gate(raw, PULSE_PERIOD_S, self.cfg.gate_width_s, self._gate_phase)
        with self._lock:
            self._raw.append(raw)
            self._gated.append(gated)
            self._done = stop

    def _safe_cut(self, b: TagStream, limit: int) -> int:
        """Largest index <= limit that starts a gap wider than the window."""
        if limit <= self._done:
            return self._done
        gap = self.window_s / TICK_S * 1.001 + 2
        t = b.ticks[self._done:min(limit + 1, len(b))].astype(np.int64)
        ok = np.flatnonzero(np.diff(t) > gap)
        if ok.size == 0:
            return self._done
        return self._done + int(ok[-1]) + 1

    def result(self) -> SyncedPairs:
        if self.estimate is None:
            raise self.error if isinstance(self.error, Exception) else RuntimeError("not synchronised")
        b = self._b.stream(self.epoch)
        return SyncedPairs(self.estimate, self.tracker.solution(), self.pairs, self.ungated,
                           self._gate_phase, b.duration_s if len(b) else 0.0)


# ---------------------------------------------------------------- connections

class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.decoder = FrameDecoder()
        self.frames: list[Frame] = []
        self.closed = False

    def send(self, frame: Frame) -> None:
        try:
            self.sock.sendall(frame.encode())
        except OSError as exc:
            self.closed = True
            raise NetworkError(f"send failed: {exc}") from None

    def recv(self, timeout: float | None) -> Frame | None:
        """Next frame, or None on timeout. Raises NetworkError on EOF."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.frames:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            if remaining is not None and remaining == 0.0:
                return None
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(1 << 16)
            except socket.timeout:
                return None
            except OSError as exc:
                self.closed = True
                raise NetworkError(f"receive failed: {exc}") from None
            if not data:
                self.closed = True
                raise NetworkError("connection closed by peer")
            self.frames.extend(self.decoder.feed(data))
        return self.frames.pop(0)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class FaultInjector:
    """Drops TAG_BATCH transmissions with probability ``loss`` and can cut
    the connection once after ``disconnect_after`` batches."""

    loss: float = 0.0
    seed: int = 0
    disconnect_after: int | None = None
    dropped: int = 0
    _sent: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.seed)

    def drop(self) -> bool:
        if self.loss > 0 and self._rng.random() < self.loss:
            self.dropped += 1
            return True
        return False

    def cut(self) -> bool:
        self._sent += 1
        if self.disconnect_after is not None and self._sent >= self.disconnect_after:
            self.disconnect_after = None
            return True
        return False


@dataclass
class SenderReport:
    batches: int
    tags_sent: int
    retransmissions: int
    frames_lost: int
    reconnects: int
    handshake: HandshakeResult
    alice_stats: Stats | None


def _connect(host: str, port: int, endpoint: str, timeout_s: float) -> socket.socket:
    """Connect, retrying refusals until ``timeout_s`` so Alice may start late."""
    give_up = time.monotonic() + timeout_s
    while True:
        left = give_up - time.monotonic()
        try:
            return socket.create_connection((host, port), timeout=max(left, 0.01))
        except (socket.timeout, TimeoutError):
            raise SessionTimeoutError(f"timed out connecting to {endpoint}") from None
        except ConnectionRefusedError as exc:
            if left <= 0:
                raise NetworkError(f"cannot connect to {endpoint}: {exc}") from None
            time.sleep(min(0.05, max(left, 0.0)))
        except OSError as exc:
            raise NetworkError(f"cannot connect to {endpoint}: {exc}") from None


def stream_tags(stream: TagStream, endpoint: str, *, batch_size: int = DEFAULT_BATCH,
                window: int = 8, rto_s: float = 0.1, start_time: float | None = None,
                connect_timeout_s: float = 5.0, session_timeout_s: float = 60.0,
                faults: FaultInjector | None = None, max_reconnects: int = 5) -> SenderReport:
    """Bob's side: ship ``stream`` to Alice and wait for her final STATS."""
    if not 1 <= batch_size <= 65535:
        raise ValueError("batch_size must lie in [1, 65535]")
    host, port = parse_endpoint(endpoint)
    start_time = time.time() if start_time is None else start_time
    faults = faults or FaultInjector()
    bounds = [(i, min(i + batch_size, len(stream))) for i in range(0, len(stream), batch_size)]
    n = len(bounds)
    base = 0
    highest_sent = -1
    retrans = 0
    reconnects = -1
    hs = None
    deadline = time.monotonic() + session_timeout_s
    while True:
        reconnects += 1
        if reconnects > max_reconnects:
            raise NetworkError("too many reconnects")
        sock = _connect(host, port, endpoint, connect_timeout_s)
        conn = _Conn(sock)
        try:
            s, ns = _split_time(start_time)
            conn.send(hello_frame(Hello(BOB, s, ns)))
            reply = conn.recv(connect_timeout_s)
            if reply is None:
                raise SessionTimeoutError("no HELLO from Alice")
            alice_hello = parse_hello(reply)
            hs = handshake(start_time, alice_hello.start_time)
            conn.send(epoch_frame(stream.epoch))
            base = alice_hello.resume_seq
            nxt = base
            while base < n:
                if time.monotonic() > deadline:
                    raise SessionTimeoutError("session timed out while streaming")
                while nxt < min(base + window, n):
                    lo, hi = bounds[nxt]
                    if nxt <= highest_sent:
                        retrans += 1
                    highest_sent = max(highest_sent, nxt)
                    if not faults.drop():
                        conn.send(tag_batch_frame(nxt, pack(stream.ticks[lo:hi], stream.channels[lo:hi])))
                    nxt += 1
                    if faults.cut():
                        conn.close()
                        raise NetworkError("injected disconnect")
                frame = conn.recv(rto_s)
                if frame is None:
                    nxt = base  # go back N
                    continue
                if frame.type == FrameType.ACK:
                    base = max(base, parse_ack(frame))
                    nxt = max(nxt, base)
            conn.send(stats_frame(Stats(len(stream), 0, 0, retrans)))
            conn.send(bye_frame(len(stream), n))
            alice_stats = None
            while True:
                frame = conn.recv(session_timeout_s)
                if frame is None:
                    raise SessionTimeoutError("no final report from Alice")
                if frame.type == FrameType.STATS:
                    alice_stats = parse_stats(frame)
                elif frame.type == FrameType.BYE:
                    break
            conn.close()
            return SenderReport(n, len(stream), retrans, faults.dropped, reconnects, hs, alice_stats)
        except NetworkError as exc:
            conn.close()
            if isinstance(exc, (SessionTimeoutError, EpochDisagreementError)):
                raise
            log.warning("connection lost (%s); resuming", exc)
            continue


@dataclass
class ReceiverReport:
    engine: OnlineEngine
    handshake: HandshakeResult
    bob_epoch: int
    bob_stats: Stats | None
    batches: int
    reconnects: int
    stats_sent: list[Stats]


class AliceReceiver:
    """Alice's side: listens, ingests batches and runs the online engine."""

    def __init__(self, alice: TagStream, cfg: AnalysisConfig = AnalysisConfig(), *,
                 host: str = "127.0.0.1", port: int = 0, queue_size: int = 64,
                 start_time: float | None = None, stats_every: int = 16, **engine_kw):
        self.engine = OnlineEngine(alice, cfg, **engine_kw)
        self.start_time = time.time() if start_time is None else start_time
        self.queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self.stats_every = stats_every
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(1)

    @property
    def endpoint(self) -> str:
        host, port = self._server.getsockname()[:2]
        return f"{host}:{port}"

    def close(self) -> None:
        self._server.close()

    def _extract(self, failure: list) -> None:
        try:
            while True:
                item = self.queue.get()
                if item is None:
                    break
                self.engine.feed_words(item)
            self.engine.finish()
        except Exception as exc:  # surfaced by serve()
            failure.append(exc)

    def serve(self, timeout_s: float = 60.0) -> ReceiverReport:
        failure: list = []
        worker = threading.Thread(target=self._extract, args=(failure,), daemon=True)
        worker.start()
        expected = 0
        reconnects = -1
        bob_stats = None
        bob_epoch = -1
        hs = None
        sent_stats: list[Stats] = []
        deadline = time.monotonic() + timeout_s
        try:
            while True:
                reconnects += 1
                self._server.settimeout(max(0.01, deadline - time.monotonic()))
                try:
                    sock, _ = self._server.accept()
                except socket.timeout:
                    raise SessionTimeoutError("no connection from Bob") from None
                conn = _Conn(sock)
                try:
                    first = conn.recv(max(0.01, deadline - time.monotonic()))
                    if first is None:
                        raise SessionTimeoutError("no HELLO from Bob")
                    bob_hello = parse_hello(first)
                    s, ns = _split_time(self.start_time)
                    conn.send(hello_frame(Hello(ALICE, s, ns, expected)))
                    try:
                        hs = handshake(bob_hello.start_time, self.start_time)
                    except EpochDisagreementError:
                        conn.close()
                        raise
                    while True:
                        frame = conn.recv(max(0.01, deadline - time.monotonic()))
                        if frame is None:
                            raise SessionTimeoutError("session timed out")
                        if frame.type == FrameType.EPOCH_SYNC:
                            bob_epoch = parse_epoch(frame)[0]
                            # recorded streams must share a timescale origin
                            if abs(bob_epoch - self.engine.epoch) > EPOCH_BOUND_S:
                                raise EpochDisagreementError(float(abs(bob_epoch - self.engine.epoch)))
                        elif frame.type == FrameType.TAG_BATCH:
                            seq, words = parse_tag_batch(frame)
                            if seq == expected:
                                self.queue.put(words)  # blocks when extraction lags
                                expected += 1
                                if expected % self.stats_every == 0:
                                    st = self._stats(expected)
                                    sent_stats.append(st)
                                    conn.send(stats_frame(st))
                            conn.send(ack_frame(expected))
                        elif frame.type == FrameType.STATS:
                            bob_stats = parse_stats(frame)
                        elif frame.type == FrameType.BYE:
                            parse_bye(frame)
                            self.queue.put(None)
                            worker.join()
                            if failure:
                                raise failure[0]
                            st = self._stats(expected, bob_stats)
                            sent_stats.append(st)
                            conn.send(stats_frame(st))
                            conn.send(bye_frame(self.engine.n_bob, expected))
                            conn.close()
                            return ReceiverReport(self.engine, hs, bob_epoch, bob_stats, expected,
                                                  reconnects, sent_stats)
                        else:
                            raise ProtocolError(f"unexpected {frame.type.name} frame")
                except NetworkError as exc:
                    conn.close()
                    if isinstance(exc, (SessionTimeoutError, EpochDisagreementError)):
                        raise
                    log.warning("Bob disconnected (%s); waiting to resume at batch %d", exc, expected)
        finally:
            if worker.is_alive():
                self.queue.put(None)

    def _stats(self, batches: int, bob: Stats | None = None) -> Stats:
        return Stats(self.engine.n_bob, 0, int(round(self.engine.live_rate_cps * 1000)),
                     bob.retransmissions if bob else 0)


def run_loopback(alice: TagStream, bob: TagStream, cfg: AnalysisConfig = AnalysisConfig(), *,
                 batch_size: int = DEFAULT_BATCH, faults: FaultInjector | None = None,
                 timeout_s: float = 120.0, **engine_kw) -> tuple[ReceiverReport, SenderReport]:
    """Run both roles over a loopback socket and return both reports."""
    receiver = AliceReceiver(alice, cfg, **engine_kw)
    out: dict = {}

    def sender() -> None:
        try:
            out["report"] = stream_tags(bob, receiver.endpoint, batch_size=batch_size, faults=faults,
                                        start_time=receiver.start_time, session_timeout_s=timeout_s)
        except Exception as exc:
            out["error"] = exc

    th = threading.Thread(target=sender, daemon=True)
    th.start()
    try:
        rx = receiver.serve(timeout_s)
    finally:
        receiver.close()
    th.join(timeout_s)
    if "error" in out:
        raise out["error"]
    return rx, out["report"]
