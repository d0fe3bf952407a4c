"""BBR-family congestion control with two ProbeBW variants.

The "bbr" variant cycles the classic 8-phase gain vector
[1.25, 0.75, 1, 1, 1, 1, 1, 1].  The "rtc-bbr" variant replaces it with a
randomized-length cycle (2..8 RTTs) that probes at 1.1, drops to 0.85 on
queue growth or loss, and returns to 1.0 once inflight matches the BDP.
Both share StartUp/Drain/ProbeRTT and the max-bandwidth / min-RTT filters.
"""

from __future__ import annotations

from collections import deque

from .transport import MSS, DeliveryRateSample

STARTUP_GAIN = 2.885
DRAIN_GAIN = 1 / 2.885
BW_WINDOW_ROUNDS = 10
MIN_RTT_EXPIRY_US = 10_000_000
PROBE_RTT_DURATION_US = 200_000
PROBE_RTT_CWND = 4 * MSS
STARTUP_GROWTH_TARGET = 1.25
STARTUP_FULL_BW_ROUNDS = 3
GAIN_CYCLE_LEN = 8
CYCLE_RAND = 7
PROBE_UP_GAIN = 1.1
PROBE_DOWN_GAIN = 0.85
STOCK_GAIN_CYCLE = (1.25, 0.75, 1, 1, 1, 1, 1, 1)
INITIAL_BW_BPS = 300_000
INITIAL_CWND = 32 * MSS

STARTUP = "StartUp"
DRAIN = "Drain"
PROBE_BW = "ProbeBW"
PROBE_RTT = "ProbeRTT"


class WindowedMaxFilter:
    """Max over a sliding window counted in rounds, via a monotonic deque."""

    __slots__ = ("window", "_samples")

    def __init__(self, window: int = BW_WINDOW_ROUNDS) -> None:
        self.window = window
        self._samples: deque = deque()  # (round, value), values strictly decreasing

    def update(self, value: float, round_count: int) -> None:
        samples = self._samples
        while samples and samples[-1][1] <= value:
            samples.pop()
        samples.append((round_count, value))
        bound = round_count - self.window
        while samples and samples[0][0] <= bound:
            samples.popleft()

    def get(self) -> float:
        return self._samples[0][1] if self._samples else 0.0


class BbrController:
    """One controller per (subflow, candidate path).

    Feed it DeliveryRateSamples; read pacing_rate / cwnd / bw_es / rtt_min.
    `variant` selects the ProbeBW behavior ("rtc-bbr" or "bbr").
    """

    __slots__ = (
        "rng", "variant", "mode",
        "max_bw_filter", "round_count", "next_round_delivered", "delivered_bytes",
        "rtt_min", "rtt_min_ts", "probe_rtt_done_ts",
        "full_bw", "full_bw_count", "filled_pipe",
        "pacing_gain", "cwnd_gain", "cycle_mstamp", "cycle_len", "cycle_phase",
        "loss_since_update", "paused", "pause_started",
        "mode_hook",
    )

    def __init__(self, rng, variant: str = "rtc-bbr") -> None:
        if variant not in ("rtc-bbr", "bbr"):
            raise ValueError(f"unknown variant {variant!r}")
        self.rng = rng
        self.variant = variant
        self.mode = STARTUP
        self.max_bw_filter = WindowedMaxFilter()
        self.round_count = 0
        self.next_round_delivered = 0
        self.delivered_bytes = 0
        self.rtt_min = 0
        self.rtt_min_ts = 0
        self.probe_rtt_done_ts = 0
        self.full_bw = 0.0
        self.full_bw_count = 0
        self.filled_pipe = False
        self.pacing_gain = STARTUP_GAIN
        self.cwnd_gain = STARTUP_GAIN
        self.cycle_mstamp = 0
        self.cycle_len = GAIN_CYCLE_LEN
        self.cycle_phase = 0
        self.loss_since_update = False
        self.paused = False
        self.pause_started = 0
        self.mode_hook = None

    # -- outputs

    def bw_es(self) -> float:
        bw = self.max_bw_filter.get()
        return bw if bw > 0 else INITIAL_BW_BPS

    def bdp_bytes(self) -> float:
        if not self.rtt_min:
            return INITIAL_CWND
        return self.bw_es() * self.rtt_min / 8 / 1_000_000

    def pacing_rate(self) -> float:
        return self.bw_es() * self.pacing_gain

    def cwnd(self) -> float:
        if self.mode == PROBE_RTT:
            return PROBE_RTT_CWND
        if self.mode == PROBE_BW:
            return 2 * self.bdp_bytes()
        return max(self.cwnd_gain * self.bdp_bytes(), INITIAL_CWND)

    # -- sample intake

    def on_delivery_sample(self, sample: DeliveryRateSample, now: int) -> None:
        if sample.has_loss:
            self.loss_since_update = True
        round_ended = self._update_round(sample)
        self._update_bw_filter(sample)
        min_rtt_expired = bool(self.rtt_min) and now - self.rtt_min_ts > MIN_RTT_EXPIRY_US
        if not self.rtt_min or sample.rtt <= self.rtt_min or min_rtt_expired:
            self.rtt_min = sample.rtt
            self.rtt_min_ts = now
        if self.mode == STARTUP:
            if round_ended:
                self._check_full_pipe(sample)
            if self.filled_pipe:
                self._enter_drain()
        if self.mode == DRAIN and sample.inflight <= self.bdp_bytes():
            self._enter_probe_bw(now)
        if self.mode == PROBE_BW:
            if min_rtt_expired:
                self._set_mode(PROBE_RTT)
                self.pacing_gain = 1
                self.probe_rtt_done_ts = 0
            elif self.variant == "rtc-bbr":
                self.update_gain_cycle_phase(now, sample.inflight, self.loss_since_update)
                self.loss_since_update = False
            else:
                self.stock_bbr_cycle(now, sample.inflight)
        if self.mode == PROBE_RTT:
            self._probe_rtt_dwell(sample, now)

    def _update_round(self, sample: DeliveryRateSample) -> bool:
        # A round ends when a packet sent after the previous round's end
        # is delivered; the send manager's delivered counter marks both.
        self.delivered_bytes = sample.delivered_at_ack
        if sample.delivered_at_send >= self.next_round_delivered:
            self.round_count += 1
            self.next_round_delivered = sample.delivered_at_ack
            return True
        return False

    def _update_bw_filter(self, sample: DeliveryRateSample) -> None:
        if sample.app_limited and sample.bandwidth <= self.max_bw_filter.get():
            return
        self.max_bw_filter.update(sample.bandwidth, self.round_count)

    # -- StartUp / Drain

    def _check_full_pipe(self, sample: DeliveryRateSample) -> None:
        if sample.app_limited:
            return  # an idle app, not the path, bounded this round
        bw = self.max_bw_filter.get()
        if bw >= self.full_bw * STARTUP_GROWTH_TARGET:
            self.full_bw = bw
            self.full_bw_count = 0
            return
        self.full_bw_count += 1
        if self.full_bw_count >= STARTUP_FULL_BW_ROUNDS:
            self.filled_pipe = True

    def _enter_drain(self) -> None:
        self._set_mode(DRAIN)
        self.pacing_gain = DRAIN_GAIN
        self.cwnd_gain = STARTUP_GAIN

    def _enter_probe_bw(self, now: int) -> None:
        self._set_mode(PROBE_BW)
        self.cwnd_gain = 2
        if self.variant == "rtc-bbr":
            self.cycle_mstamp = now
            self.cycle_len = GAIN_CYCLE_LEN - self.rng.randrange(CYCLE_RAND)
            self.pacing_gain = PROBE_UP_GAIN
        else:
            self.cycle_phase = self.rng.randrange(len(STOCK_GAIN_CYCLE))
            self.cycle_mstamp = now
            self.pacing_gain = STOCK_GAIN_CYCLE[self.cycle_phase]

    # -- ProbeBW gain cycling

    def update_gain_cycle_phase(self, now: int, inflight: int, has_loss: bool) -> None:
        elapsed = now - self.cycle_mstamp
        if elapsed > self.cycle_len * self.rtt_min:
            self.cycle_mstamp = now
            self.cycle_len = GAIN_CYCLE_LEN - self.rng.randrange(CYCLE_RAND)
            self.pacing_gain = PROBE_UP_GAIN
            return
        if self.pacing_gain == 1:
            return
        bdp = self.bdp_bytes()
        if self.pacing_gain < 1.0 and inflight <= bdp:
            self.pacing_gain = 1
        if elapsed > self.rtt_min and (inflight > PROBE_UP_GAIN * bdp or has_loss):
            self.pacing_gain = PROBE_DOWN_GAIN

    def stock_bbr_cycle(self, now: int, inflight: int) -> None:
        elapsed = now - self.cycle_mstamp
        advance = elapsed > self.rtt_min
        if not advance and self.pacing_gain == 0.75 and inflight <= self.bdp_bytes():
            advance = True  # probe-down has done its job, move on early
        if advance:
            self.cycle_phase = (self.cycle_phase + 1) % len(STOCK_GAIN_CYCLE)
            self.cycle_mstamp = now
            self.pacing_gain = STOCK_GAIN_CYCLE[self.cycle_phase]

    # -- ProbeRTT

    def _probe_rtt_dwell(self, sample: DeliveryRateSample, now: int) -> None:
        # Hold cwnd at 4 MSS for max(200 ms, one rtt_min) once inflight drains.
        if self.probe_rtt_done_ts == 0:
            if sample.inflight <= PROBE_RTT_CWND:
                self.probe_rtt_done_ts = now + max(PROBE_RTT_DURATION_US, self.rtt_min)
            return
        if now >= self.probe_rtt_done_ts:
            self.rtt_min_ts = now
            if self.filled_pipe:
                self._enter_probe_bw(now)
            else:
                self._set_mode(STARTUP)
                self.pacing_gain = STARTUP_GAIN
                self.cwnd_gain = STARTUP_GAIN

    # -- pause/resume (bandit keeps non-exploited paths' state frozen)

    def pause(self, now: int) -> None:
        self.paused = True
        self.pause_started = now

    def resume(self, now: int) -> None:
        if not self.paused:
            return
        self.paused = False
        shift = now - self.pause_started
        self.rtt_min_ts += shift
        self.cycle_mstamp += shift

    def _set_mode(self, mode: str) -> None:
        self.mode = mode
        if self.mode_hook is not None:
            self.mode_hook(mode)
