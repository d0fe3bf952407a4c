"""Deterministic discrete-event engine and network model.

Time is integer microseconds, rates are bits/second.  A simulation run is a
pure function of (config, seed): the event loop breaks timestamp ties by
insertion order and every stochastic draw comes from one seeded RNG.
"""

from __future__ import annotations

import heapq
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass

US_PER_MS = 1_000
US_PER_S = 1_000_000


class SchedulingError(Exception):
    """Raised when an event is scheduled before the current simulation time."""


class EventLoop:
    """Single-threaded event loop over integer-microsecond timestamps."""

    __slots__ = ("_heap", "_seq", "now")

    def __init__(self) -> None:
        self._heap: list[list] = []
        self._seq = 0
        self.now = 0

    def schedule(self, fire_time: int, fn, *args) -> list:
        """Schedule fn(*args) at fire_time; returns a cancellable handle."""
        if fire_time < self.now:
            raise SchedulingError(f"fire_time {fire_time} < now {self.now}")
        self._seq += 1
        entry = [fire_time, self._seq, fn, args]
        heapq.heappush(self._heap, entry)
        return entry

    def schedule_after(self, delay: int, fn, *args) -> list:
        return self.schedule(self.now + delay, fn, *args)

    @staticmethod
    def cancel(handle: list) -> None:
        handle[2] = None

    def run(self, until: int) -> None:
        """Run events with fire_time <= until (inclusive); clock ends at until."""
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            t, _, fn, args = pop(heap)
            if fn is None:
                continue
            self.now = t
            fn(*args)
        self.now = until

    def pending(self) -> int:
        return sum(1 for e in self._heap if e[2] is not None)


@dataclass(frozen=True)
class LinkConfig:
    """Link parameters: capacity bits/s, one-way delay us, queue bytes."""

    capacity: int
    owd_us: int
    queue_capacity: int

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ValueError(f"capacity must be > 0, got {self.capacity}")
        if self.queue_capacity <= 0:
            raise ValueError(f"queue_capacity must be > 0, got {self.queue_capacity}")

    @classmethod
    def from_mbps_ms(cls, capacity_mbps: float, owd_ms: float, queue_ms: float) -> "LinkConfig":
        """Table-style (BW, OWD, Q) row; queue bytes = capacity x queue-time."""
        capacity = int(capacity_mbps * 1e6)
        queue_bytes = int(capacity * queue_ms / 1000 / 8)
        return cls(capacity, int(owd_ms * US_PER_MS), queue_bytes)


class TraceParseError(Exception):
    pass


class TraceSchedule:
    """Step function of link capacity over time, wrapping when exhausted.

    Entries are (timestamp_us, bits_per_second) with strictly increasing
    timestamps.  After the last entry plus one trailing gap (the spacing of
    the final two entries) the trace restarts from its first entry.
    """

    __slots__ = ("times", "rates", "period_us", "offset_us")

    def __init__(self, entries, offset_us: int = 0) -> None:
        if not entries:
            raise ValueError("trace must have at least one entry")
        times = []
        rates = []
        prev = -1
        for ts, bps in entries:
            if ts <= prev:
                raise ValueError(f"trace timestamps must be strictly increasing at t={ts}")
            if bps <= 0:
                raise ValueError(f"trace capacity must be > 0 at t={ts}")
            times.append(int(ts))
            rates.append(int(bps))
            prev = ts
        self.times = times
        self.rates = rates
        if len(times) > 1:
            self.period_us = times[-1] + (times[-1] - times[-2])
        else:
            self.period_us = 0  # constant forever
        self.offset_us = offset_us

    def capacity_at(self, t_us: int) -> int:
        if self.period_us:
            t_us = (t_us + self.offset_us) % self.period_us
        i = bisect_right(self.times, t_us) - 1
        if i < 0:
            i = 0
        return self.rates[i]

    def mean_capacity(self, start_us: int, end_us: int) -> float:
        """Time-weighted mean capacity over [start_us, end_us)."""
        if end_us <= start_us:
            raise ValueError("empty interval")
        total = 0.0
        t = start_us
        while t < end_us:
            cap = self.capacity_at(t)
            nxt = self._next_change(t)
            step_end = min(nxt, end_us)
            total += cap * (step_end - t)
            t = step_end
        return total / (end_us - start_us)

    def _next_change(self, t_us: int) -> int:
        if not self.period_us:
            return 1 << 62
        shifted = t_us + self.offset_us
        cycle, local = divmod(shifted, self.period_us)
        i = bisect_right(self.times, local)
        nxt = self.times[i] if i < len(self.times) else self.period_us
        return cycle * self.period_us + nxt - self.offset_us

    def overall_mean(self) -> float:
        if not self.period_us:
            return float(self.rates[0])
        return self.mean_capacity(0, self.period_us)


def load_trace(path, offset_us: int = 0) -> TraceSchedule:
    """Parse a 'milliseconds,kilobits-per-second' file into a TraceSchedule."""
    entries = []
    prev_ts = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TraceParseError(f"{path}:{lineno}: expected 'ms,kbps', got {line!r}")
            try:
                ms = float(parts[0])
                kbps = float(parts[1])
            except ValueError:
                raise TraceParseError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
            ts = int(ms * US_PER_MS)
            if ts <= prev_ts:
                raise TraceParseError(f"{path}:{lineno}: non-increasing timestamp {parts[0]} ms")
            if kbps <= 0:
                raise TraceParseError(f"{path}:{lineno}: non-positive capacity {parts[1]} kbps")
            entries.append((ts, int(kbps * 1000)))
            prev_ts = ts
    if not entries:
        raise TraceParseError(f"{path}: empty trace")
    return TraceSchedule(entries, offset_us=offset_us)


def synthetic_trace(rng: random.Random, duration_s: int = 120) -> TraceSchedule:
    """Piecewise-constant capacity trace with a mean drawn from [0.4, 6] Mbps."""
    mean_bps = rng.uniform(0.4e6, 6e6)
    entries = []
    t_ms = 0
    while t_ms < duration_s * 1000:
        cap = max(150_000, int(mean_bps * rng.uniform(0.5, 1.5)))
        entries.append((t_ms * US_PER_MS, cap))
        t_ms += rng.randint(2000, 6000)
    return TraceSchedule(entries)


def synthetic_trace_pool(count: int = 100, dataset_seed: int = 7) -> list[TraceSchedule]:
    """Fixed pool of synthetic traces standing in for the public dataset."""
    rng = random.Random(dataset_seed)
    return [synthetic_trace(rng) for _ in range(count)]


class DropTailQueue:
    """FIFO byte-budgeted queue; arrivals beyond capacity are dropped."""

    __slots__ = ("items", "occupancy", "capacity")

    def __init__(self, capacity: int) -> None:
        self.items: deque = deque()
        self.occupancy = 0
        self.capacity = capacity

    def offer(self, item, size: int) -> bool:
        if self.occupancy + size > self.capacity:
            return False
        self.items.append(item)
        self.occupancy += size
        return True

    def pop(self):
        return self.items.popleft()

    def __len__(self) -> int:
        return len(self.items)


class Link:
    """Store-and-forward link: droptail queue, serialization, propagation.

    A packet's serialization time is fixed when its transmission starts,
    using the trace capacity at that instant for trace-driven links.
    """

    __slots__ = (
        "loop", "name", "capacity", "owd_us", "queue", "trace",
        "_busy", "sent", "delivered", "dropped", "drop_hook",
    )

    def __init__(self, loop: EventLoop, config: LinkConfig, name: str = "",
                 trace: TraceSchedule | None = None) -> None:
        self.loop = loop
        self.name = name
        self.capacity = config.capacity
        self.owd_us = config.owd_us
        self.queue = DropTailQueue(config.queue_capacity)
        self.trace = trace
        self._busy = False
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_hook = None

    def current_capacity(self) -> int:
        if self.trace is not None:
            return self.trace.capacity_at(self.loop.now)
        return self.capacity

    def enqueue(self, packet) -> None:
        self.sent += 1
        if not self.queue.offer(packet, packet.size):
            self.dropped += 1
            if self.drop_hook is not None:
                self.drop_hook(packet)
            return
        if not self._busy:
            self._start_service()

    def _start_service(self) -> None:
        self._busy = True
        packet = self.queue.items[0]
        cap = self.current_capacity()
        ser_us = (packet.size * 8 * US_PER_S + cap - 1) // cap
        self.loop.schedule(self.loop.now + ser_us, self._depart)

    def _depart(self) -> None:
        packet = self.queue.pop()
        self.queue.occupancy -= packet.size
        self.loop.schedule(self.loop.now + self.owd_us, self._arrive, packet)
        if self.queue.items:
            self._start_service()
        else:
            self._busy = False

    def _arrive(self, packet) -> None:
        self.delivered += 1
        packet.advance(self.loop.now)

    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped


@dataclass
class PathDef:
    """One routed candidate path: forward links plus the feedback delay."""

    path_id: int
    route: tuple
    reverse_delay_us: int
    trace: TraceSchedule | None = None

    def prop_rtt_us(self) -> int:
        return sum(l.owd_us for l in self.route) + self.reverse_delay_us


@dataclass
class Network:
    links: dict
    flow_paths: list          # one PathDef per flow (dumbbell / rtt families)
    candidates: dict          # subflow id -> [PathDef, ...] (multipath family)


def _route_reverse_delay(route) -> int:
    return sum(l.owd_us for l in route)


def build_dumbbell(loop: EventLoop, config: dict) -> Network:
    """Shared single bottleneck; every flow's route is [L1]."""
    spec = config["links"][0]
    cfg = LinkConfig.from_mbps_ms(spec["capacity_mbps"], spec["owd_ms"], spec["queue_ms"])
    link = Link(loop, cfg, name=spec.get("id", "L1"))
    n_flows = len(config.get("flows", [])) or 3
    paths = [
        PathDef(path_id=i, route=(link,), reverse_delay_us=link.owd_us)
        for i in range(n_flows)
    ]
    return Network(links={link.name: link}, flow_paths=paths, candidates={})


def build_rtt_unfairness(loop: EventLoop, config: dict) -> Network:
    """Five links L0-L4; flow1 over L0+L1+L2, flow2 over L3+L1+L4."""
    links = {}
    for spec in config["links"]:
        cfg = LinkConfig.from_mbps_ms(spec["capacity_mbps"], spec["owd_ms"], spec["queue_ms"])
        links[spec["id"]] = Link(loop, cfg, name=spec["id"])
    try:
        r1 = (links["L0"], links["L1"], links["L2"])
        r2 = (links["L3"], links["L1"], links["L4"])
    except KeyError as exc:
        raise ValueError(f"rtt-unfairness topology requires links L0-L4, missing {exc}") from None
    paths = [
        PathDef(0, r1, _route_reverse_delay(r1)),
        PathDef(1, r2, _route_reverse_delay(r2)),
    ]
    return Network(links=links, flow_paths=paths, candidates={})


RELAY_LINK_BPS = 100_000_000
TRACE_QUEUE_MS = 200


def build_multipath_overlay(loop: EventLoop, config: dict, rng: random.Random,
                            traces: list) -> Network:
    """Two subflows x two candidate paths (direct link, 2-link relay route).

    Each path gets one capacity trace and a one-way delay drawn uniformly
    from [50 ms, 100 ms]; the relay route splits its delay across an access
    link (trace capacity) and a fast relay link.
    """
    if len(traces) != 4:
        raise ValueError(f"multipath-overlay needs 4 traces, got {len(traces)}")
    links = {}
    candidates = {}
    path_id = 0
    for subflow in (0, 1):
        cand = []
        for kind in ("direct", "relay"):
            trace = traces[path_id]
            owd_us = int(rng.uniform(50_000, 100_000))
            queue_bytes = max(4 * 1500, int(trace.overall_mean() * TRACE_QUEUE_MS / 1000 / 8))
            if kind == "direct":
                cfg = LinkConfig(int(trace.overall_mean()), owd_us, queue_bytes)
                link = Link(loop, cfg, name=f"P{subflow}{kind}", trace=trace)
                route = (link,)
                links[link.name] = link
            else:
                half = owd_us // 2
                access_cfg = LinkConfig(int(trace.overall_mean()), half, queue_bytes)
                access = Link(loop, access_cfg, name=f"P{subflow}{kind}a", trace=trace)
                relay_cfg = LinkConfig(RELAY_LINK_BPS, owd_us - half, 2_000_000)
                relay = Link(loop, relay_cfg, name=f"P{subflow}{kind}b")
                route = (access, relay)
                links[access.name] = access
                links[relay.name] = relay
            cand.append(PathDef(path_id, route, _route_reverse_delay(route), trace=trace))
            path_id += 1
        candidates[subflow] = cand
    return Network(links=links, flow_paths=[], candidates=candidates)


def build_topology(loop: EventLoop, config: dict, rng: random.Random | None = None,
                   traces: list | None = None) -> Network:
    name = config.get("topology")
    if name == "dumbbell":
        return build_dumbbell(loop, config)
    if name == "rtt-unfairness":
        return build_rtt_unfairness(loop, config)
    if name == "multipath-overlay":
        if rng is None or traces is None:
            raise ValueError("multipath-overlay requires rng and traces")
        return build_multipath_overlay(loop, config, rng, traces)
    raise ValueError(f"unknown topology {name!r}")
