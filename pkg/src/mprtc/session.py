"""Flow orchestration over simulated paths.

CappedFlow drives one path with a saturating, congestion-controlled source
whose pacing is clamped to a configurable ceiling; the bottleneck-sharing
experiments are built from these.  VideoSession runs the full stack: video
source, per-segment scheduler across two subflows, separate congestion
state per candidate path, and slot-based path selection (learning, pinned
default, or trace-mean oracle).
"""

from __future__ import annotations

from .bandit import SLOT_US, PathManager
from .congestion import BbrController
from .scheduler import Scheduler
from .transport import (
    MSS,
    PAYLOAD_BUDGET,
    ReceiveManager,
    SendManager,
    StreamFrame,
    pacer_next_send_time,
    packetize,
)
from .videomodel import RATE_CAP_BPS, VideoSink, VideoSource

EVICT_TICK_US = 50_000
# Bandwidth estimates move on round-trip timescales; feeding the path manager
# more often than this just burns time rescanning its sample window.
BANDIT_PUSH_INTERVAL_US = 100_000

SCHEME_UCB = "ucb"
SCHEME_DEFAULT = "default"
SCHEME_ORACLE = "oracle"
SCHEMES = (SCHEME_UCB, SCHEME_DEFAULT, SCHEME_ORACLE)


class CappedFlow:
    """Saturating single-path flow: sends whenever pacer and cwnd allow.

    The pacing rate is min(controller rate, rate_cap_bps), modeling an
    application that never offers more than the cap.  Lost packets are not
    retransmitted; the receiver-side byte count is the throughput measure.
    """

    def __init__(self, loop, rng, path, *, variant: str = "rtc-bbr",
                 conn_id: int = 0, rate_cap_bps: int = RATE_CAP_BPS,
                 start_ts: int = 0):
        self.loop = loop
        self.path = path
        self.start_ts = start_ts
        self.rate_cap_bps = rate_cap_bps
        self.cc = BbrController(rng, variant)
        self.sm = SendManager(loop, path.route, path.reverse_delay_us, conn_id)
        self.rm = ReceiveManager(loop, path.reverse_delay_us,
                                 self._on_receiver_ack, conn_id)
        self.sm.receiver_sink = self.rm.on_packet
        self.sm.loss_hook = self._on_loss
        self.next_send_ts = 0
        self._blocked = False
        self._pump_timer = None
        self._offset = 0
        self._counter = 0
        self._last_sw_floor = 1
        self._sw_sent_since = 0
        self.bw_trace = None
        self._trace_interval = 0

    def start(self) -> None:
        self.loop.schedule(self.start_ts, self._pump)
        self.loop.schedule(self.start_ts + EVICT_TICK_US, self._floor_tick)

    def _floor_tick(self) -> None:
        # Nothing is ever retransmitted, so the stop-waiting floor is simply
        # the oldest packet still in flight.  Advancing it keeps the
        # receiver's ack-range set from growing a gap per lost packet.
        floor = self.sm.least_retained()
        if floor > self._last_sw_floor + self._sw_sent_since:
            self.sm.send_stop_waiting(floor, self.loop.now)
            self._last_sw_floor = floor
            self._sw_sent_since = 1
        self.loop.schedule(self.loop.now + EVICT_TICK_US, self._floor_tick)

    def enable_bw_trace(self, interval_us: int = 100_000) -> None:
        self.bw_trace = []
        self._trace_interval = interval_us
        self.loop.schedule(self.start_ts, self._trace_tick)

    def _trace_tick(self) -> None:
        self.bw_trace.append((self.loop.now, self.cc.bw_es()))
        self.loop.schedule(self.loop.now + self._trace_interval, self._trace_tick)

    def _pump(self) -> None:
        self._pump_timer = None
        loop = self.loop
        now = loop.now
        sm, cc = self.sm, self.cc
        while True:
            if self.next_send_ts > now:
                self._arm_pump(self.next_send_ts)
                return
            if sm.inflight + MSS > cc.cwnd():
                self._blocked = True
                return
            segment = StreamFrame(self._offset, PAYLOAD_BUDGET,
                                  self._counter & 0xFFFFFFFF, now, 1, 0, False)
            self._offset += PAYLOAD_BUDGET
            self._counter += 1
            sm.send_segment(segment, now, False)
            rate = cc.pacing_rate()
            if rate > self.rate_cap_bps:
                rate = self.rate_cap_bps
            self.next_send_ts = pacer_next_send_time(now, MSS, rate)

    def _arm_pump(self, ts: int) -> None:
        timer = self._pump_timer
        if timer is not None and timer[2] is not None and timer[0] <= ts:
            return
        self._pump_timer = self.loop.schedule(ts, self._pump)

    def _wake(self) -> None:
        if self._blocked:
            self._blocked = False
            self._pump()

    def _on_receiver_ack(self, ack, now: int) -> None:
        self.loop.schedule(now + self.path.reverse_delay_us, self._deliver_ack, ack)

    def _deliver_ack(self, ack) -> None:
        now = self.loop.now
        samples = self.sm.on_ack(ack, now)
        cc = self.cc
        for sample in samples:
            cc.on_delivery_sample(sample, now)
        self._wake()

    def _on_loss(self, lost) -> None:
        self._wake()


class _PathRuntime:
    """Per-candidate-path state: transport pair, controller, pacer, markers."""

    __slots__ = ("path", "sid", "cc", "sm", "rm", "next_send_ts", "exploited",
                 "last_sw_floor", "sw_sent_since", "last_push_ts")

    def __init__(self, path, sid, cc, sm, rm):
        self.path = path
        self.sid = sid
        self.cc = cc
        self.sm = sm
        self.rm = rm
        self.next_send_ts = 0
        self.exploited = False
        self.last_sw_floor = 1
        self.sw_sent_since = 0
        self.last_push_ts = -BANDIT_PUSH_INTERVAL_US

    def prime_stop_waiting_baseline(self) -> None:
        self.last_sw_floor = self.sm.least_retained()
        self.sw_sent_since = 0


class VideoSession:
    """One video flow spread over subflows, each with candidate paths.

    Every candidate path keeps its own connection (packet numbering, loss
    state) and congestion controller; controllers of unselected paths are
    paused so their clocks do not run while idle.  A decision timer picks
    one path per subflow each slot according to the configured scheme.
    """

    def __init__(self, loop, rng, candidates: dict, *, scheme: str = SCHEME_UCB,
                 variant: str = "rtc-bbr", slot_us: int = SLOT_US):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.loop = loop
        self.rng = rng
        self.scheme = scheme
        self.slot_us = slot_us
        self.sids = sorted(candidates)
        self.candidates = {sid: list(candidates[sid]) for sid in self.sids}
        self.scheduler = Scheduler(self.sids)
        self.sink = VideoSink()
        self.selections: list[tuple[int, int, int]] = []
        self.lost_packets = 0
        self.rate_by_frame: dict[int, float] = {}
        self._stream_offset = 0
        self._pump_timers: dict[int, list | None] = {sid: None for sid in self.sids}

        self.paths: dict[int, _PathRuntime] = {}
        self.active: dict[int, _PathRuntime] = {}
        for sid in self.sids:
            for path in self.candidates[sid]:
                cc = BbrController(rng, variant)
                sm = SendManager(loop, path.route, path.reverse_delay_us,
                                 conn_id=path.path_id)
                rm = ReceiveManager(loop, path.reverse_delay_us, None,
                                    conn_id=path.path_id)
                prt = _PathRuntime(path, sid, cc, sm, rm)
                rm.ack_sink = (lambda ack, now, prt=prt:
                               self._queue_ack(prt, ack, now))
                rm.segment_sink = self.sink.on_segment
                rm.stop_waiting_sink = self._on_stop_waiting
                sm.receiver_sink = rm.on_packet
                sm.ack_hook = self._on_acked_records
                sm.loss_hook = (lambda lost, prt=prt: self._on_loss(prt, lost))
                self.paths[path.path_id] = prt
            self.active[sid] = self.paths[self.candidates[sid][0].path_id]
            self.active[sid].exploited = True

        if scheme == SCHEME_UCB:
            pairs = [(p.path_id, sid) for sid in self.sids
                     for p in self.candidates[sid]]
            self.pm = PathManager(self.sids, pairs)
        else:
            self.pm = None

        self.source = VideoSource(
            loop, rng,
            frame_sink=self._on_encoded_frame,
            reference_rate_fn=self._reference_rate,
            min_latency_fn=self.scheduler.min_latency,
        )

    def start(self, now: int = 0) -> None:
        for sid in self.sids:
            # Prime the latency model so the first frame is schedulable before
            # any ack arrives.
            self.scheduler.set_bw_es(sid, self.active[sid].cc.bw_es())
        for prt in self.paths.values():
            if not prt.exploited:
                prt.cc.pause(now)
        self.loop.schedule(now, self._decision_tick)
        self.loop.schedule(now + EVICT_TICK_US, self._evict_tick)
        self.source.start(now)

    # -- sender datapath

    def _on_encoded_frame(self, frame) -> None:
        now = self.loop.now
        self.rate_by_frame[frame.frame_index] = frame.rate_at_encode
        segments = packetize(frame.size, frame.frame_index, frame.capture_ts,
                             frame.key_frame, self._stream_offset)
        self._stream_offset += frame.size
        self.scheduler.schedule_segments(segments, now)
        for sid in self.sids:
            self._pump(sid)

    def _reference_rate(self) -> float:
        return sum(self.active[sid].cc.bw_es() for sid in self.sids)

    def _pump(self, sid: int) -> None:
        loop = self.loop
        now = loop.now
        prt = self.active[sid]
        sched = self.scheduler
        while True:
            if sched.backlog(sid) <= 0:
                return
            if prt.next_send_ts > now:
                self._arm_pump(sid, prt.next_send_ts)
                return
            if prt.sm.inflight + MSS > prt.cc.cwnd():
                return  # ack-clocked: _queue_ack delivery pumps again
            entry = sched.next_segment(sid, now)
            if entry is None:
                return
            app_limited = sched.backlog(sid) <= 0
            packet = prt.sm.send_segment(entry.segment, now, app_limited,
                                         context=entry)
            prt.next_send_ts = pacer_next_send_time(now, packet.size,
                                                    prt.cc.pacing_rate())

    def _arm_pump(self, sid: int, ts: int) -> None:
        timer = self._pump_timers[sid]
        if timer is not None and timer[2] is not None and timer[0] <= ts:
            return
        self._pump_timers[sid] = self.loop.schedule(ts, self._on_pump_timer, sid)

    def _on_pump_timer(self, sid: int) -> None:
        self._pump_timers[sid] = None
        self._pump(sid)

    # -- feedback path

    def _queue_ack(self, prt: _PathRuntime, ack, now: int) -> None:
        self.loop.schedule(now + prt.path.reverse_delay_us,
                           self._deliver_ack, prt, ack)

    def _deliver_ack(self, prt: _PathRuntime, ack) -> None:
        now = self.loop.now
        samples = prt.sm.on_ack(ack, now)
        if samples and prt.exploited:
            cc = prt.cc
            sched = self.scheduler
            for sample in samples:
                cc.on_delivery_sample(sample, now)
                sched.update_srtt(prt.sid, sample.rtt)
            sched.set_bw_es(prt.sid, cc.bw_es())
            if self.pm is not None and now - prt.last_push_ts >= BANDIT_PUSH_INTERVAL_US:
                prt.last_push_ts = now
                self.pm.on_new_bandwidth_sample(prt.path.path_id, cc.bw_es(), now)
        self._pump(prt.sid)

    def _on_acked_records(self, newly_acked) -> None:
        sched = self.scheduler
        for rec in newly_acked:
            entry = rec.context
            if entry is not None and not entry.acked:
                sched.mark_acked(entry)

    def _on_loss(self, prt: _PathRuntime, lost) -> None:
        self.lost_packets += len(lost)
        now = self.loop.now
        entries = [rec.context for rec in lost
                   if rec.context is not None and not rec.context.acked]
        if not entries:
            return
        retx_sids, _dropped = self.scheduler.on_loss(entries, now)
        for sid in set(retx_sids):
            self._pump(sid)

    def _on_stop_waiting(self, conn_id: int, least_unacked: int) -> None:
        self.sink.on_stop_waiting(conn_id, least_unacked, self.loop.now)

    # -- timers

    def _evict_tick(self) -> None:
        now = self.loop.now
        self.scheduler.evict(now)
        for prt in self.paths.values():
            floor = prt.sm.least_retained()
            # Skip advances caused only by our own stop-waiting packets
            # consuming numbers, else an idle path emits one every tick.
            if floor > prt.last_sw_floor + prt.sw_sent_since:
                prt.sm.send_stop_waiting(floor, now)
                prt.last_sw_floor = floor
                prt.sw_sent_since = 1
        self.sink.sweep(now)
        self.loop.schedule(now + EVICT_TICK_US, self._evict_tick)

    def _decision_tick(self) -> None:
        now = self.loop.now
        mapping = self._decide(now)
        for sid in self.sids:
            target = mapping.get(sid, -1)
            current = self.active[sid].path.path_id
            if target != -1 and target != current:
                self._switch(sid, target, now)
            self.selections.append((now, sid, self.active[sid].path.path_id))
        self.loop.schedule(now + self.slot_us, self._decision_tick)

    def _decide(self, now: int) -> dict[int, int]:
        if self.scheme == SCHEME_UCB:
            return self.pm.decide(now)
        if self.scheme == SCHEME_DEFAULT:
            return {sid: self.candidates[sid][0].path_id for sid in self.sids}
        chosen = {}
        for sid in self.sids:
            best_id = -1
            best_mean = -1.0
            for path in self.candidates[sid]:
                mean = path.trace.mean_capacity(now, now + self.slot_us)
                if mean > best_mean:
                    best_mean = mean
                    best_id = path.path_id
            chosen[sid] = best_id
        return chosen

    def _switch(self, sid: int, path_id: int, now: int) -> None:
        old = self.active[sid]
        old.exploited = False
        old.cc.pause(now)
        new = self.paths[path_id]
        new.cc.resume(now)
        new.exploited = True
        self.active[sid] = new
        self.scheduler.set_bw_es(sid, new.cc.bw_es())
        self._pump(sid)

    # -- aggregate stats

    def bytes_received(self) -> int:
        return sum(prt.rm.bytes_received for prt in self.paths.values())

    def packets_sent(self) -> int:
        return sum(prt.sm.packets_sent for prt in self.paths.values())

    def owd_stats(self) -> tuple[int, int]:
        total = sum(prt.rm.owd_sum_us for prt in self.paths.values())
        count = sum(prt.rm.data_packets for prt in self.paths.values())
        return total, count
