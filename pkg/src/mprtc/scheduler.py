"""Latency-minimizing packet distribution across subflows.

Each segment goes to the subflow whose expected arrival latency
(SRTT/2 + queued_bytes/bw_es) is smallest at decision time, with the queue
term updated after every assignment.  The send buffer keeps key-frame
segments until they are acked and non-key segments for at most 400 ms after
their first send; losses are retransmitted over the currently fastest
subflow when the segment is still retained.
"""

from __future__ import annotations

from collections import deque

from .simnet import US_PER_S
from .transport import PACKET_HEADER_SIZE, STREAM_HEADER_SIZE, StreamFrame

SRTT_DELTA = 0.85
RETENTION_US = 400_000
UNSCHEDULABLE = float("inf")


def wire_size(segment: StreamFrame) -> int:
    return PACKET_HEADER_SIZE + STREAM_HEADER_SIZE + segment.payload_length


class SendBufferEntry:
    __slots__ = ("segment", "subflow", "sent", "first_sent_ts", "acked")

    def __init__(self, segment: StreamFrame) -> None:
        self.segment = segment
        self.subflow = -1
        self.sent = False
        self.first_sent_ts = 0
        self.acked = False

    def key_frame(self) -> bool:
        return self.segment.key_frame


class SubflowState:
    __slots__ = ("sid", "srtt", "bw_es", "queue", "queued_bytes")

    def __init__(self, sid: int) -> None:
        self.sid = sid
        self.srtt = 0
        self.bw_es = 0.0
        self.queue: deque[SendBufferEntry] = deque()
        self.queued_bytes = 0


class Scheduler:
    def __init__(self, subflow_ids) -> None:
        self.subflows = {sid: SubflowState(sid) for sid in subflow_ids}
        self._order = sorted(self.subflows)
        self.retained: set[SendBufferEntry] = set()
        self.unassigned: deque[SendBufferEntry] = deque()
        self.decision_log: list = []

    # -- subflow estimates

    def update_srtt(self, sid: int, rtt_sample: int) -> int:
        sub = self.subflows[sid]
        if sub.srtt:
            sub.srtt = int((1 - SRTT_DELTA) * sub.srtt + SRTT_DELTA * rtt_sample)
        else:
            sub.srtt = rtt_sample
        return sub.srtt

    def set_bw_es(self, sid: int, bw: float) -> None:
        self.subflows[sid].bw_es = bw

    def expected_latency(self, sid: int) -> float:
        sub = self.subflows[sid]
        if sub.bw_es <= 0:
            return UNSCHEDULABLE
        return sub.srtt / 2 + sub.queued_bytes * 8 * US_PER_S / sub.bw_es

    def min_latency(self) -> float:
        return min(self.expected_latency(sid) for sid in self._order)

    # -- assignment

    def schedule_segments(self, segments, now: int) -> list[SendBufferEntry]:
        entries = [SendBufferEntry(s) for s in segments]
        pending = list(self.unassigned) + entries
        self.unassigned.clear()
        for entry in pending:
            sid = self._assign(entry, now)
            if sid is None:
                self.unassigned.append(entry)
        return entries

    def _assign(self, entry: SendBufferEntry, now: int) -> int | None:
        best_sid = None
        best_lat = UNSCHEDULABLE
        lambdas = []
        for sid in self._order:
            lat = self.expected_latency(sid)
            lambdas.append(lat)
            if lat < best_lat:
                best_lat = lat
                best_sid = sid
        if best_sid is None:
            return None
        seg = entry.segment
        self.decision_log.append(
            (now, seg.frame_index, seg.segment_index, best_sid, tuple(lambdas)))
        entry.subflow = best_sid
        sub = self.subflows[best_sid]
        sub.queue.append(entry)
        sub.queued_bytes += wire_size(seg)
        return best_sid

    def next_segment(self, sid: int, now: int) -> SendBufferEntry | None:
        """Pop the next sendable entry for this subflow's pacer slot."""
        sub = self.subflows[sid]
        while sub.queue:
            entry = sub.queue.popleft()
            size = wire_size(entry.segment)
            sub.queued_bytes -= size
            if entry.acked:
                continue  # acked while waiting for retransmission
            if entry.sent and not entry.key_frame() \
                    and now - entry.first_sent_ts > RETENTION_US:
                self.retained.discard(entry)
                continue
            if not entry.sent:
                entry.sent = True
                entry.first_sent_ts = now
            self.retained.add(entry)
            return entry
        return None

    def backlog(self, sid: int) -> int:
        return self.subflows[sid].queued_bytes

    # -- feedback

    def mark_acked(self, entry: SendBufferEntry) -> None:
        entry.acked = True
        self.retained.discard(entry)

    def on_loss(self, entries, now: int):
        """Returns (retransmit subflow ids, dropped entries)."""
        retx_sids = []
        dropped = []
        for entry in entries:
            if entry.acked:
                continue
            if entry not in self.retained:
                dropped.append(entry)
                continue
            if entry.key_frame() or now - entry.first_sent_ts <= RETENTION_US:
                sid = self._best_subflow()
                if sid is None:
                    sid = entry.subflow
                entry.subflow = sid
                sub = self.subflows[sid]
                sub.queue.appendleft(entry)  # retransmissions jump the line
                sub.queued_bytes += wire_size(entry.segment)
                retx_sids.append(sid)
            else:
                self.retained.discard(entry)
                dropped.append(entry)
        return retx_sids, dropped

    def _best_subflow(self) -> int | None:
        best_sid = None
        best_lat = UNSCHEDULABLE
        for sid in self._order:
            lat = self.expected_latency(sid)
            if lat < best_lat:
                best_lat = lat
                best_sid = sid
        return best_sid

    def evict(self, now: int) -> list[SendBufferEntry]:
        """Age out sent non-key entries; returns what was evicted unacked."""
        horizon = now - RETENTION_US
        evicted = [e for e in self.retained
                   if not e.key_frame() and e.sent and e.first_sent_ts < horizon]
        for entry in evicted:
            self.retained.discard(entry)
        seen = set(evicted)
        for sub in self.subflows.values():
            if not sub.queue:
                continue
            stale = [e for e in sub.queue
                     if e.sent and not e.key_frame() and e.first_sent_ts < horizon]
            for entry in stale:
                sub.queue.remove(entry)
                sub.queued_bytes -= wire_size(entry.segment)
                self.retained.discard(entry)
            evicted.extend(e for e in stale if e not in seen)
        return evicted
