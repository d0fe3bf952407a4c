"""Wire protocol and per-path send/receive managers.

Three frame types (STREAM, ACK, STOP_WAITING) referenced from QUIC's
design: every sent packet gets a fresh per-connection packet number,
retransmissions included, and STOP_WAITING lets the sender abandon data
without stalling the receiver.  The send manager turns acks into
delivery-rate samples for the congestion controller.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass

from .simnet import US_PER_S

MSS = 1200
PACKET_HEADER_SIZE = 9          # u8 flags + u64 packet number
STREAM_HEADER_SIZE = 28
STOP_WAITING_SIZE = 9
PAYLOAD_BUDGET = MSS - PACKET_HEADER_SIZE - STREAM_HEADER_SIZE

FRAME_STREAM = 0x01
FRAME_ACK = 0x02
FRAME_STOP_WAITING = 0x03

U64_MAX = (1 << 64) - 1

SRTT_DELTA = 0.85
REORDER_THRESHOLD = 3
TIME_LOSS_FACTOR = 1.25
ACK_EVERY_N = 2
ACK_DELAY_MAX_US = 10_000


class CodecError(Exception):
    pass


@dataclass(slots=True)
class StreamFrame:
    stream_offset: int
    payload_length: int
    frame_index: int
    capture_ts: int
    total_segments: int
    segment_index: int
    key_frame: bool


@dataclass(slots=True)
class AckFrame:
    largest_acked: int
    ack_delay: int
    ack_ranges: list  # [(start, end)] inclusive, sorted descending, disjoint


@dataclass(slots=True)
class StopWaitingFrame:
    least_unacked: int


@dataclass(slots=True)
class WirePacket:
    flags: int
    packet_number: int
    frames: list


def packetize(size: int, frame_index: int, capture_ts: int, key_frame: bool,
              stream_offset: int, budget: int = PAYLOAD_BUDGET) -> list[StreamFrame]:
    """Split an encoded frame into segments no larger than the payload budget."""
    if size <= 0:
        raise ValueError(f"frame size must be > 0, got {size}")
    total = (size + budget - 1) // budget
    segments = []
    offset = stream_offset
    remaining = size
    for idx in range(total):
        length = budget if remaining > budget else remaining
        segments.append(StreamFrame(offset, length, frame_index, capture_ts,
                                    total, idx, key_frame))
        offset += length
        remaining -= length
    return segments


# --- wire codec -------------------------------------------------------------

_PACKET_HDR = struct.Struct(">BQ")
_STREAM_HDR = struct.Struct(">BQHIQHHB")
_ACK_HDR = struct.Struct(">BQIB")
_ACK_RANGE = struct.Struct(">QQ")
_STOP_HDR = struct.Struct(">BQ")


def _check_range(value: int, bits: int, what: str) -> None:
    if not 0 <= value < (1 << bits):
        raise CodecError(f"{what} {value} out of range for u{bits}")


def encode_packet(packet: WirePacket) -> bytes:
    _check_range(packet.flags, 8, "flags")
    _check_range(packet.packet_number, 64, "packet_number")
    parts = [_PACKET_HDR.pack(packet.flags, packet.packet_number)]
    for frame in packet.frames:
        if isinstance(frame, StreamFrame):
            _check_range(frame.stream_offset, 64, "stream_offset")
            _check_range(frame.payload_length, 16, "payload_length")
            _check_range(frame.frame_index, 32, "frame_index")
            _check_range(frame.capture_ts, 64, "capture_ts")
            _check_range(frame.total_segments, 16, "total_segments")
            _check_range(frame.segment_index, 16, "segment_index")
            if frame.segment_index >= frame.total_segments:
                raise CodecError("segment_index must be < total_segments")
            parts.append(_STREAM_HDR.pack(FRAME_STREAM, frame.stream_offset,
                                          frame.payload_length, frame.frame_index,
                                          frame.capture_ts, frame.total_segments,
                                          frame.segment_index, int(frame.key_frame)))
            parts.append(b"\x00" * frame.payload_length)
        elif isinstance(frame, AckFrame):
            _check_range(frame.largest_acked, 64, "largest_acked")
            _check_range(frame.ack_delay, 32, "ack_delay")
            _check_range(len(frame.ack_ranges), 8, "range_count")
            parts.append(_ACK_HDR.pack(FRAME_ACK, frame.largest_acked,
                                       frame.ack_delay, len(frame.ack_ranges)))
            prev_start = None
            for start, end in frame.ack_ranges:
                _check_range(start, 64, "range start")
                _check_range(end, 64, "range end")
                if start > end or end > frame.largest_acked:
                    raise CodecError(f"bad ack range ({start}, {end})")
                if prev_start is not None and end >= prev_start:
                    raise CodecError("ack ranges must be descending and disjoint")
                prev_start = start
                parts.append(_ACK_RANGE.pack(start, end))
        elif isinstance(frame, StopWaitingFrame):
            _check_range(frame.least_unacked, 64, "least_unacked")
            parts.append(_STOP_HDR.pack(FRAME_STOP_WAITING, frame.least_unacked))
        else:
            raise CodecError(f"unknown frame {type(frame).__name__}")
    return b"".join(parts)


def decode_packet(buf: bytes) -> WirePacket:
    if len(buf) < _PACKET_HDR.size:
        raise CodecError("truncated packet header")
    flags, number = _PACKET_HDR.unpack_from(buf, 0)
    pos = _PACKET_HDR.size
    frames = []
    while pos < len(buf):
        ftype = buf[pos]
        if ftype == FRAME_STREAM:
            if pos + _STREAM_HDR.size > len(buf):
                raise CodecError("truncated STREAM header")
            (_, offset, length, frame_index, capture_ts,
             total_segments, segment_index, key) = _STREAM_HDR.unpack_from(buf, pos)
            pos += _STREAM_HDR.size
            if segment_index >= total_segments:
                raise CodecError("segment_index must be < total_segments")
            if pos + length > len(buf):
                raise CodecError("truncated STREAM payload")
            pos += length
            frames.append(StreamFrame(offset, length, frame_index, capture_ts,
                                      total_segments, segment_index, bool(key)))
        elif ftype == FRAME_ACK:
            if pos + _ACK_HDR.size > len(buf):
                raise CodecError("truncated ACK header")
            _, largest, ack_delay, count = _ACK_HDR.unpack_from(buf, pos)
            pos += _ACK_HDR.size
            ranges = []
            prev_start = None
            for _ in range(count):
                if pos + _ACK_RANGE.size > len(buf):
                    raise CodecError("truncated ACK range")
                start, end = _ACK_RANGE.unpack_from(buf, pos)
                pos += _ACK_RANGE.size
                if start > end or end > largest:
                    raise CodecError(f"bad ack range ({start}, {end})")
                if prev_start is not None and end >= prev_start:
                    raise CodecError("ack ranges must be descending and disjoint")
                prev_start = start
                ranges.append((start, end))
            frames.append(AckFrame(largest, ack_delay, ranges))
        elif ftype == FRAME_STOP_WAITING:
            if pos + _STOP_HDR.size > len(buf):
                raise CodecError("truncated STOP_WAITING")
            _, least = _STOP_HDR.unpack_from(buf, pos)
            pos += _STOP_HDR.size
            frames.append(StopWaitingFrame(least))
        else:
            raise CodecError(f"unknown frame type 0x{ftype:02x}")
    return WirePacket(flags, number, frames)


# --- pacing -----------------------------------------------------------------

def pacer_next_send_time(prev_sent_ts: int, prev_len: int, pacing_rate: float) -> int:
    """Earliest time the next packet may go out, on the microsecond grain."""
    if pacing_rate <= 0:
        raise ValueError("pacing_rate must be > 0")
    gap = prev_len * 8 * US_PER_S
    return prev_sent_ts + int(-(-gap // pacing_rate))


# --- delivery tracking ------------------------------------------------------

@dataclass(slots=True)
class DeliveryRateSample:
    bandwidth: float      # bits/s
    rtt: int              # microseconds
    inflight: int         # bytes, after this ack was applied
    has_loss: bool
    app_limited: bool
    delivered_at_send: int  # cumulative delivered bytes when the packet left
    delivered_at_ack: int   # cumulative delivered bytes when it was acked


class SentPacketRecord:
    __slots__ = ("number", "sent_ts", "size", "delivered_at_send", "app_limited",
                 "segment", "context")

    def __init__(self, number, sent_ts, size, delivered_at_send, app_limited,
                 segment, context=None):
        self.number = number
        self.sent_ts = sent_ts
        self.size = size
        self.delivered_at_send = delivered_at_send
        self.app_limited = app_limited
        self.segment = segment
        self.context = context


class SimPacket:
    """In-simulator packet: metadata only, no byte payload on the hot path."""

    __slots__ = ("number", "size", "stream", "stop_waiting", "sent_ts", "route", "hop", "sink", "conn_id")

    def __init__(self, number, size, stream, stop_waiting, sent_ts, route, sink, conn_id):
        self.number = number
        self.size = size
        self.stream = stream
        self.stop_waiting = stop_waiting
        self.sent_ts = sent_ts
        self.route = route
        self.hop = 0
        self.sink = sink
        self.conn_id = conn_id

    def advance(self, now: int) -> None:
        self.hop += 1
        if self.hop < len(self.route):
            self.route[self.hop].enqueue(self)
        else:
            self.sink(self, now)


class SendManager:
    """Sender side of one path connection: numbering, records, rate samples."""

    def __init__(self, loop, route, reverse_delay_us, conn_id=0):
        self.loop = loop
        self.route = route
        self.reverse_delay_us = reverse_delay_us
        self.conn_id = conn_id
        self.next_packet_number = 1
        self.records: dict[int, SentPacketRecord] = {}
        self.inflight = 0
        self.delivered_bytes = 0
        self.largest_acked = 0
        self.srtt = 0
        self.packets_sent = 0
        self.bytes_sent = 0
        self.loss_hook = None       # called with [SentPacketRecord] on new losses
        self.ack_hook = None        # called with [SentPacketRecord] newly acked
        self.receiver_sink = None   # set by session wiring
        self._loss_timer = None

    # -- sending

    def send_segment(self, segment: StreamFrame, now: int, app_limited: bool,
                     context=None) -> SimPacket:
        number = self.next_packet_number
        self.next_packet_number += 1
        size = PACKET_HEADER_SIZE + STREAM_HEADER_SIZE + segment.payload_length
        packet = SimPacket(number, size, segment, None, now, self.route,
                           self.receiver_sink, self.conn_id)
        self.records[number] = SentPacketRecord(number, now, size,
                                                self.delivered_bytes, app_limited,
                                                segment, context)
        self.inflight += size
        self.packets_sent += 1
        self.bytes_sent += size
        self.route[0].enqueue(packet)
        self._arm_loss_timer()
        return packet

    def send_stop_waiting(self, least_unacked: int, now: int) -> None:
        number = self.next_packet_number
        self.next_packet_number += 1
        packet = SimPacket(number, PACKET_HEADER_SIZE + STOP_WAITING_SIZE, None,
                           least_unacked, now, self.route, self.receiver_sink, self.conn_id)
        self.route[0].enqueue(packet)

    def least_retained(self) -> int:
        """Smallest packet number the sender may still have acked; floor for STOP_WAITING."""
        # records is insertion-ordered with ascending numbers
        if self.records:
            return next(iter(self.records))
        return self.next_packet_number

    # -- feedback

    def on_ack(self, ack: AckFrame, now: int) -> list[DeliveryRateSample]:
        newly_acked = []
        records = self.records
        for start, end in ack.ack_ranges:
            if end - start < len(records):
                for number in range(start, end + 1):
                    rec = records.pop(number, None)
                    if rec is not None:
                        newly_acked.append(rec)
            else:
                matched = [rec for number, rec in records.items()
                           if start <= number <= end]
                for rec in matched:
                    del records[rec.number]
                newly_acked.extend(matched)
        if ack.largest_acked > self.largest_acked:
            self.largest_acked = ack.largest_acked
        if not newly_acked:
            self._detect_reorder_loss(now)
            return []

        for rec in newly_acked:
            self.inflight -= rec.size
            self.delivered_bytes += rec.size
        delivered_now = self.delivered_bytes

        lost = self._detect_reorder_loss(now)
        has_loss = bool(lost)
        if self.ack_hook is not None:
            self.ack_hook(newly_acked)

        samples = []
        for rec in newly_acked:
            interval = now - rec.sent_ts
            rtt = interval - ack.ack_delay
            if rtt <= 0:
                rtt = 1
            if interval <= 0:
                interval = 1
            bw = (delivered_now - rec.delivered_at_send) * 8 * US_PER_S / interval
            samples.append(DeliveryRateSample(bw, rtt, self.inflight, has_loss,
                                              rec.app_limited, rec.delivered_at_send,
                                              delivered_now))
            if self.srtt:
                self.srtt = int((1 - SRTT_DELTA) * self.srtt + SRTT_DELTA * rtt)
            else:
                self.srtt = rtt
        self._arm_loss_timer()
        return samples

    def _detect_reorder_loss(self, now: int):
        """Packets REORDER_THRESHOLD behind the largest ack are lost."""
        horizon = self.largest_acked - REORDER_THRESHOLD
        if horizon < 1 or not self.records:
            return []
        lost = []
        for number, rec in self.records.items():
            if number > horizon:
                break  # numbers ascend in insertion order
            lost.append(rec)
        if lost:
            self._declare_lost(lost)
        return lost

    def _declare_lost(self, lost) -> None:
        for rec in lost:
            del self.records[rec.number]
            self.inflight -= rec.size
        if self.loss_hook is not None:
            self.loss_hook(lost)

    def _loss_deadline(self):
        if not self.records or not self.srtt:
            return None
        # send times are monotone, so the first record is the oldest
        oldest = next(iter(self.records.values())).sent_ts
        return oldest + self._loss_threshold() + 1

    def _loss_threshold(self) -> int:
        # The ack-delay allowance keeps a lone coalesced ack (up to 10 ms
        # at the receiver) from tripping the timer on sparse traffic.
        return int(TIME_LOSS_FACTOR * self.srtt) + ACK_DELAY_MAX_US

    def _arm_loss_timer(self) -> None:
        deadline = self._loss_deadline()
        if deadline is None:
            return
        if self._loss_timer is not None and self._loss_timer[2] is not None \
                and self._loss_timer[0] <= deadline:
            return
        if self._loss_timer is not None:
            self._loss_timer[2] = None
        self._loss_timer = self.loop.schedule(max(deadline, self.loop.now), self._on_loss_timer)

    def _on_loss_timer(self) -> None:
        self._loss_timer = None
        if not self.records or not self.srtt:
            return
        threshold = self._loss_threshold()
        now = self.loop.now
        lost = [rec for rec in self.records.values() if now - rec.sent_ts > threshold]
        if lost:
            self._declare_lost(lost)
        self._arm_loss_timer()


class _RangeSet:
    """Disjoint inclusive integer ranges, ascending; merges on insert."""

    __slots__ = ("starts", "ends")

    def __init__(self):
        self.starts: list[int] = []
        self.ends: list[int] = []

    def add(self, n: int) -> bool:
        starts, ends = self.starts, self.ends
        i = bisect_right(starts, n) - 1
        if i >= 0 and n <= ends[i]:
            return False  # duplicate
        if i >= 0 and ends[i] == n - 1:
            ends[i] = n
            if i + 1 < len(starts) and starts[i + 1] == n + 1:
                ends[i] = ends[i + 1]
                del starts[i + 1], ends[i + 1]
            return True
        if i + 1 < len(starts) and starts[i + 1] == n + 1:
            starts[i + 1] = n
            return True
        starts.insert(i + 1, n)
        ends.insert(i + 1, n)
        return True

    def descending(self, limit: int = 255):
        starts, ends = self.starts, self.ends
        stop = max(-1, len(starts) - 1 - limit)
        return [(starts[i], ends[i]) for i in range(len(starts) - 1, stop, -1)]

    def drop_below(self, floor: int) -> None:
        starts, ends = self.starts, self.ends
        while starts and ends[0] < floor:
            del starts[0], ends[0]
        if starts and starts[0] < floor:
            starts[0] = floor


class ReceiveManager:
    """Receiver side of one path connection: ack policy and packet intake.

    An ACK goes out once ACK_EVERY_N packets are pending or ACK_DELAY_MAX_US
    after the first pending arrival, whichever comes first.
    """

    def __init__(self, loop, reverse_delay_us, ack_sink, conn_id=0):
        self.loop = loop
        self.reverse_delay_us = reverse_delay_us
        self.ack_sink = ack_sink          # called with (AckFrame, now)
        self.conn_id = conn_id
        self.ranges = _RangeSet()
        self.largest = 0
        self.largest_arrival_ts = 0
        self.least_unacked = 0
        self.pending = 0
        self._ack_timer = None
        self.segment_sink = None          # called with (StreamFrame, number, conn_id, now)
        self.stop_waiting_sink = None     # called with (conn_id, least_unacked)
        self.packets_received = 0
        self.bytes_received = 0
        self.owd_sum_us = 0
        self.data_packets = 0

    def on_packet(self, packet: SimPacket, now: int) -> None:
        if not self.ranges.add(packet.number):
            return
        self.packets_received += 1
        if packet.number > self.largest:
            self.largest = packet.number
            self.largest_arrival_ts = now
        if packet.stream is not None:
            self.bytes_received += packet.size
            self.owd_sum_us += now - packet.sent_ts
            self.data_packets += 1
            if self.segment_sink is not None:
                self.segment_sink(packet.stream, packet.number, self.conn_id, now)
        if packet.stop_waiting is not None:
            self.process_stop_waiting(packet.stop_waiting)
        self.pending += 1
        if self.pending == 1:
            self._ack_timer = self.loop.schedule(now + ACK_DELAY_MAX_US, self._on_ack_timer)
        if self.pending >= ACK_EVERY_N:
            self._emit_ack(now)

    def process_stop_waiting(self, least_unacked: int) -> None:
        if least_unacked <= self.least_unacked:
            return
        self.least_unacked = least_unacked
        self.ranges.drop_below(least_unacked)
        if self.stop_waiting_sink is not None:
            self.stop_waiting_sink(self.conn_id, least_unacked)

    def _on_ack_timer(self) -> None:
        self._ack_timer = None
        if self.pending:
            self._emit_ack(self.loop.now)

    def _emit_ack(self, now: int) -> None:
        if self._ack_timer is not None:
            self._ack_timer[2] = None
            self._ack_timer = None
        self.pending = 0
        ack = AckFrame(self.largest, now - self.largest_arrival_ts, self.ranges.descending())
        self.ack_sink(ack, now)
