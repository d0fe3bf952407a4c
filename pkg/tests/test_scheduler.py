import random

import pytest

from mprtc.scheduler import Scheduler, UNSCHEDULABLE, wire_size
from mprtc.transport import PAYLOAD_BUDGET, StreamFrame, packetize


def seg(payload=PAYLOAD_BUDGET, frame_index=0, index=0, total=1, key=False):
    return StreamFrame(0, payload, frame_index, 0, total, index, key)


def make_two(bw0=1e6, bw1=1e6, srtt0=100_000, srtt1=100_000):
    sched = Scheduler([0, 1])
    sched.set_bw_es(0, bw0)
    sched.set_bw_es(1, bw1)
    if srtt0:
        sched.update_srtt(0, srtt0)
    if srtt1:
        sched.update_srtt(1, srtt1)
    return sched


# --- srtt and latency -------------------------------------------------------

def test_srtt_first_sample_initializes():
    sched = Scheduler([0])
    assert sched.update_srtt(0, 100_000) == 100_000


def test_srtt_smoothing_arithmetic():
    sched = Scheduler([0])
    sched.update_srtt(0, 100_000)
    assert sched.update_srtt(0, 200_000) == 185_000  # 0.15*100 + 0.85*200


def test_srtt_converges_to_constant():
    sched = Scheduler([0])
    for _ in range(30):
        sched.update_srtt(0, 80_000)
    assert sched.subflows[0].srtt == 80_000


def test_expected_latency_terms():
    sched = make_two(bw0=1e6)
    assert sched.expected_latency(0) == pytest.approx(50_000)  # empty queue
    sched.subflows[0].queued_bytes = 12_500
    assert sched.expected_latency(0) == pytest.approx(150_000)  # +100 ms of queue
    sched.subflows[0].queued_bytes = 25_000
    assert sched.expected_latency(0) == pytest.approx(250_000)  # queue term doubled


def test_zero_bandwidth_is_unschedulable():
    sched = make_two(bw0=0)
    assert sched.expected_latency(0) == UNSCHEDULABLE
    entries = sched.schedule_segments([seg()], now=0)
    assert entries[0].subflow == 1  # only the live subflow is considered


def test_min_latency_export():
    sched = make_two(srtt0=100_000, srtt1=300_000)
    assert sched.min_latency() == pytest.approx(50_000)


# --- assignment -------------------------------------------------------------

def test_segment_goes_to_smaller_latency():
    sched = make_two(srtt0=300_000, srtt1=100_000)
    (entry,) = sched.schedule_segments([seg()], now=0)
    assert entry.subflow == 1


def test_tie_breaks_to_lower_subflow_id():
    sched = make_two()
    (entry,) = sched.schedule_segments([seg()], now=0)
    assert entry.subflow == 0


def test_equal_subflows_alternate_as_queue_grows():
    sched = make_two()
    segments = [seg(frame_index=0, index=i, total=10) for i in range(10)]
    entries = sched.schedule_segments(segments, now=0)
    assert [e.subflow for e in entries] == [0, 1] * 5


def test_greedy_assignment_replayable_from_decision_log():
    rng = random.Random(11)
    sched = make_two(bw0=2e6, bw1=1.3e6, srtt0=80_000, srtt1=120_000)
    for fi in range(20):
        segs = packetize(rng.randint(400, 9000), fi, 0, False, stream_offset=0)
        sched.schedule_segments(segs, now=fi * 1000)
    for _, _, _, chosen, lambdas in sched.decision_log:
        best = min(range(len(lambdas)), key=lambda i: (lambdas[i], i))
        assert chosen == best


def test_queued_bytes_tracks_assignments_and_sends():
    sched = make_two()
    segs = [seg(payload=p) for p in (100, 500, 900, 1163)]
    sched.schedule_segments(segs, now=0)
    total = sum(sched.subflows[s].queued_bytes for s in (0, 1))
    assert total == sum(wire_size(s) for s in segs)
    while sched.next_segment(0, now=1000) or sched.next_segment(1, now=1000):
        pass
    assert sched.subflows[0].queued_bytes == 0
    assert sched.subflows[1].queued_bytes == 0


def test_unschedulable_segments_wait_then_flow():
    sched = Scheduler([0])
    sched.set_bw_es(0, 0)
    sched.schedule_segments([seg()], now=0)
    assert sched.next_segment(0, now=10) is None
    assert len(sched.unassigned) == 1
    sched.set_bw_es(0, 1e6)
    entries = sched.schedule_segments([], now=20)
    assert entries == []  # the late segment is not part of this batch
    got = sched.next_segment(0, now=30)
    assert got is not None and got.subflow == 0


# --- retention and loss -----------------------------------------------------

def send_all(sched, sid, now):
    out = []
    while True:
        e = sched.next_segment(sid, now)
        if e is None:
            return out
        out.append(e)


def test_key_frame_lost_is_always_retransmitted():
    sched = make_two()
    (entry,) = sched.schedule_segments([seg(key=True)], now=0)
    assert send_all(sched, entry.subflow, 0) == [entry]
    sids, dropped = sched.on_loss([entry], now=5_000_000)  # 5 s later
    assert dropped == []
    assert len(sids) == 1
    assert entry in sched.retained


def test_nonkey_lost_past_cache_age_is_dropped():
    sched = make_two()
    (entry,) = sched.schedule_segments([seg()], now=0)
    send_all(sched, entry.subflow, 0)
    sids, dropped = sched.on_loss([entry], now=401_000)
    assert sids == [] and dropped == [entry]
    assert entry not in sched.retained


def test_nonkey_lost_within_cache_age_is_retransmitted():
    sched = make_two()
    (entry,) = sched.schedule_segments([seg()], now=0)
    send_all(sched, entry.subflow, 0)
    sids, dropped = sched.on_loss([entry], now=400_000)  # exactly the limit
    assert dropped == [] and len(sids) == 1


def test_retransmission_follows_current_best_path():
    sched = make_two(srtt0=100_000, srtt1=200_000)
    (entry,) = sched.schedule_segments([seg()], now=0)
    assert entry.subflow == 0
    send_all(sched, 0, 0)
    sched.update_srtt(0, 500_000)  # path 0 degraded since the first send
    sids, _ = sched.on_loss([entry], now=100_000)
    assert sids == [1]
    assert sched.next_segment(1, now=100_001) is entry


def test_retransmissions_jump_the_queue():
    sched = Scheduler([0])
    sched.set_bw_es(0, 1e6)
    first, second = sched.schedule_segments([seg(index=0, total=2), seg(index=1, total=2)], now=0)
    got = sched.next_segment(0, now=10)
    assert got is first
    sched.on_loss([first], now=1000)
    assert sched.next_segment(0, now=2000) is first  # ahead of the unsent one
    assert sched.next_segment(0, now=2000) is second


def test_acked_entry_skipped_in_queue():
    sched = Scheduler([0])
    sched.set_bw_es(0, 1e6)
    (entry,) = sched.schedule_segments([seg()], now=0)
    sched.next_segment(0, now=0)
    sched.on_loss([entry], now=1000)       # queued for retransmit
    sched.mark_acked(entry)                # ack raced the retransmission
    assert sched.next_segment(0, now=2000) is None
    assert sched.subflows[0].queued_bytes == 0


def test_evict_rules():
    sched = make_two()
    key, old, fresh, unsent = sched.schedule_segments(
        [seg(key=True), seg(frame_index=1), seg(frame_index=2), seg(frame_index=3)],
        now=0)
    for entry in (key, old, fresh):
        entry_sid = entry.subflow
        while sched.next_segment(entry_sid, now=0) not in (entry, None):
            pass
    # fresh resent later so its age stays low
    fresh.first_sent_ts = 350_000
    evicted = sched.evict(now=401_000)
    assert old in evicted
    assert key in sched.retained           # key frames never age out
    assert fresh in sched.retained
    assert not unsent.sent                 # unsent entries are never age-evicted
    sched.mark_acked(key)
    assert key not in sched.retained


def test_evict_clears_stale_requeued_entries():
    sched = Scheduler([0])
    sched.set_bw_es(0, 1e6)
    (entry,) = sched.schedule_segments([seg()], now=0)
    sched.next_segment(0, now=0)
    sched.on_loss([entry], now=399_000)    # requeued just inside the window
    evicted = sched.evict(now=450_000)     # ages out while waiting to resend
    assert evicted == [entry]
    assert sched.subflows[0].queued_bytes == 0
    assert sched.next_segment(0, now=460_000) is None
