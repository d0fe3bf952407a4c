"""Synthetic 30 fps video source, lagging encoder model, and receiver reassembly."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .simnet import US_PER_S

FPS = 30
GOP_FRAMES = 60
KEY_FRAME_FACTOR = 4
RATE_TICK_US = 50_000
RATE_FLOOR_BPS = 50_000
RATE_CAP_BPS = 4_000_000
DROP_BUDGET_US = 400_000
ENCODER_TAU_US = 1_000_000
ENCODE_DELAY_ALPHA = 0.9
ENCODE_DELAY_BASE_US = 8_000
ENCODE_DELAY_SPREAD_US = 2_000
# A sink gives up on a delta frame only after the sender's own retention window
# has certainly elapsed; earlier would race in-flight retransmissions.
ABANDON_AGE_US = 400_000

# Key frames are KEY_FRAME_FACTOR times larger than delta frames.  Scaling both
# by _GOP_NORM keeps the long-run bit rate equal to the encoder's actual rate:
# (gop - 1 + factor) * norm == gop.
_GOP_NORM = GOP_FRAMES / (GOP_FRAMES - 1 + KEY_FRAME_FACTOR)


@dataclass(slots=True)
class RawFrame:
    frame_index: int
    capture_ts: int


@dataclass(slots=True)
class EncodedFrame:
    frame_index: int
    size: int
    key_frame: bool
    capture_ts: int
    encode_done_ts: int
    rate_at_encode: float


@dataclass(slots=True)
class EncoderState:
    """Mutable encoder knobs: reference rate, lagged output rate, delay estimate."""

    target_rate: float
    actual_rate: float
    d_en_hat: float


@dataclass(frozen=True)
class QualityModelParams:
    theta: float = 3.2e6
    r0: float = 50_000.0
    d0: float = 2.0


DEFAULT_QUALITY = QualityModelParams()


def distortion(rate_bps: float, params: QualityModelParams = DEFAULT_QUALITY) -> float:
    """Rate-distortion curve theta / (R - r0) + d0; defined only for R > r0."""
    if rate_bps <= params.r0:
        raise ValueError(
            f"distortion undefined for rate {rate_bps} <= r0 {params.r0}"
        )
    return params.theta / (rate_bps - params.r0) + params.d0


def quality_score(dist: float) -> float:
    """PSNR-style proxy 10*log10(255^2 / D).  Not calibrated against any codec."""
    if dist <= 0:
        raise ValueError(f"quality score undefined for distortion {dist}")
    return 10.0 * math.log10(255.0 ** 2 / dist)


class VideoSource:
    """Captures frames on a fixed cadence, encodes them one at a time, and drops
    raw frames whose projected sender-side delay exceeds the 400 ms budget.

    The encoder's output rate chases the reference rate with a first-order lag
    (time constant 1 s).  ``reference_rate_fn`` supplies the raw reference
    (sum of per-subflow bandwidth estimates); ``min_latency_fn`` supplies the
    cheapest subflow's expected delivery latency in microseconds.
    """

    def __init__(self, loop, rng, *, frame_sink, reference_rate_fn, min_latency_fn,
                 fps: int = FPS, gop: int = GOP_FRAMES,
                 encode_base_us: int = ENCODE_DELAY_BASE_US,
                 encode_spread_us: int = ENCODE_DELAY_SPREAD_US):
        self.loop = loop
        self.rng = rng
        self.frame_sink = frame_sink
        self.reference_rate_fn = reference_rate_fn
        self.min_latency_fn = min_latency_fn
        self.fps = fps
        self.gop = gop
        self.encode_base_us = encode_base_us
        self.encode_spread_us = encode_spread_us
        self.state = EncoderState(
            target_rate=float(RATE_FLOOR_BPS),
            actual_rate=0.0,
            d_en_hat=float(encode_base_us),
        )
        self.raw_queue: deque[RawFrame] = deque()
        self.busy = False
        self.frames_captured = 0
        self.frames_dropped = 0
        # (frame_index, capture_ts, size, key, dropped) in capture order
        self.frame_log: list[tuple[int, int, int, bool, bool]] = []
        self._start_ts = 0
        self._last_lag_ts = 0

    def start(self, now: int) -> None:
        self._start_ts = now
        self._last_lag_ts = now
        # Tick before the first capture so frame 0 sees a real reference rate.
        self.loop.schedule(now, self._rate_tick)
        self.loop.schedule(now, self._capture, 0)

    def _rate_tick(self) -> None:
        raw = self.reference_rate_fn()
        self.state.target_rate = float(min(max(raw, RATE_FLOOR_BPS), RATE_CAP_BPS))
        self.loop.schedule(self.loop.now + RATE_TICK_US, self._rate_tick)

    def _capture(self, index: int) -> None:
        now = self.loop.now
        self.raw_queue.append(RawFrame(index, now))
        self.frames_captured += 1
        nxt = self._start_ts + (index + 1) * US_PER_S // self.fps
        self.loop.schedule(nxt, self._capture, index + 1)
        self._service(now)

    def _service(self, now: int) -> None:
        state = self.state
        while not self.busy and self.raw_queue:
            raw = self.raw_queue.popleft()
            d_q = now - raw.capture_ts
            projected = d_q + state.d_en_hat + self.min_latency_fn()
            if projected > DROP_BUDGET_US:
                self.frames_dropped += 1
                key = raw.frame_index % self.gop == 0
                self.frame_log.append((raw.frame_index, raw.capture_ts, 0, key, True))
                continue
            self._begin_encode(raw, now)

    def _begin_encode(self, raw: RawFrame, now: int) -> None:
        state = self.state
        if state.actual_rate <= 0.0:
            state.actual_rate = state.target_rate
        else:
            dt = now - self._last_lag_ts
            gain = 1.0 - math.exp(-dt / ENCODER_TAU_US)
            state.actual_rate += (state.target_rate - state.actual_rate) * gain
        if state.actual_rate < RATE_FLOOR_BPS:
            state.actual_rate = float(RATE_FLOOR_BPS)
        self._last_lag_ts = now

        key = raw.frame_index % self.gop == 0
        base = state.actual_rate / (8 * self.fps)
        size = int(base * _GOP_NORM * (KEY_FRAME_FACTOR if key else 1))
        size = max(1, size)
        d_en = self.encode_base_us + int(
            self.rng.uniform(-self.encode_spread_us, self.encode_spread_us)
        )
        d_en = max(1, d_en)
        self.busy = True
        self.loop.schedule(
            now + d_en, self._finish_encode, raw, size, key, d_en, state.actual_rate
        )

    def _finish_encode(self, raw: RawFrame, size: int, key: bool, d_en: int,
                       rate: float) -> None:
        now = self.loop.now
        state = self.state
        state.d_en_hat = (
            (1.0 - ENCODE_DELAY_ALPHA) * state.d_en_hat + ENCODE_DELAY_ALPHA * d_en
        )
        self.frame_log.append((raw.frame_index, raw.capture_ts, size, key, False))
        self.busy = False
        self.frame_sink(EncodedFrame(
            frame_index=raw.frame_index,
            size=size,
            key_frame=key,
            capture_ts=raw.capture_ts,
            encode_done_ts=now,
            rate_at_encode=rate,
        ))
        self._service(now)


@dataclass(slots=True)
class DeliveredFrame:
    frame_index: int
    capture_ts: int
    delivered_ts: int
    size: int
    key_frame: bool


class _PendingFrame:
    __slots__ = ("frame_index", "total_segments", "capture_ts", "key_frame",
                 "segment_bytes", "high_numbers", "first_arrival")

    def __init__(self, frame_index, total_segments, capture_ts, key_frame, now):
        self.frame_index = frame_index
        self.total_segments = total_segments
        self.capture_ts = capture_ts
        self.key_frame = key_frame
        self.segment_bytes: dict[int, int] = {}
        self.high_numbers: dict[int, int] = {}
        self.first_arrival = now


class VideoSink:
    """Reassembles stream segments into frames and releases them in index order.

    A frame is complete when all of its segments arrived (duplicates are
    counted once).  Completed frames wait until every tracked earlier frame is
    resolved, so the released index sequence is strictly increasing; frames
    never seen at all do not block.  A delta frame still missing segments is
    abandoned once stop-waiting floors prove its received packets are settled
    on every connection involved and its age exceeds the sender's retention
    window.  Key frames are retransmitted until acked, so they always complete.
    """

    def __init__(self):
        self.pending: dict[int, _PendingFrame] = {}
        self.floors: dict[int, int] = {}
        self.delivered: list[DeliveredFrame] = []
        # (frame_index, capture_ts, key_frame, abandoned_ts)
        self.abandoned: list[tuple[int, int, bool, int]] = []
        self._ready: dict[int, DeliveredFrame] = {}
        self._released_through = -1
        self._abandoned_set: set[int] = set()

    def on_segment(self, segment, packet_number: int, conn_id: int, now: int) -> None:
        fi = segment.frame_index
        if fi in self._abandoned_set:
            return
        if fi <= self._released_through and fi not in self._ready:
            return
        frame = self.pending.get(fi)
        if frame is None:
            if fi in self._ready:
                return
            frame = _PendingFrame(
                fi, segment.total_segments, segment.capture_ts,
                bool(segment.key_frame), now,
            )
            self.pending[fi] = frame
        prev = frame.high_numbers.get(conn_id, 0)
        if packet_number > prev:
            frame.high_numbers[conn_id] = packet_number
        if segment.segment_index in frame.segment_bytes:
            return
        frame.segment_bytes[segment.segment_index] = segment.payload_length
        if len(frame.segment_bytes) == frame.total_segments:
            del self.pending[fi]
            self._ready[fi] = DeliveredFrame(
                frame_index=fi,
                capture_ts=frame.capture_ts,
                delivered_ts=now,
                size=sum(frame.segment_bytes.values()),
                key_frame=frame.key_frame,
            )
            self._release()

    def on_stop_waiting(self, conn_id: int, least_unacked: int, now: int) -> None:
        prev = self.floors.get(conn_id, 0)
        if least_unacked > prev:
            self.floors[conn_id] = least_unacked
        self._sweep(now)

    def sweep(self, now: int) -> None:
        """Re-check abandonment with cached floors; frames too young at the
        last stop-waiting notice need a later pass once they age out."""
        self._sweep(now)

    def _sweep(self, now: int) -> None:
        stale = []
        for fi, frame in self.pending.items():
            if frame.key_frame:
                continue
            if now - frame.first_arrival < ABANDON_AGE_US:
                continue
            if all(self.floors.get(c, 0) > n for c, n in frame.high_numbers.items()):
                stale.append(fi)
        for fi in stale:
            frame = self.pending.pop(fi)
            self._abandoned_set.add(fi)
            self.abandoned.append((fi, frame.capture_ts, frame.key_frame, now))
        if stale:
            self._release()

    def _release(self) -> None:
        while self._ready:
            lo = min(self._ready)
            if any(p < lo for p in self.pending):
                break
            self.delivered.append(self._ready.pop(lo))
            self._released_through = lo
