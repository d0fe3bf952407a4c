"""UCB path manager: per-path reward bookkeeping and per-slot selection.

Each candidate path carries a smoothed reward (Bw_hat), a windowed maximum
of recent bandwidth samples (Bw), and a pull counter (N).  Once per decision
slot the manager scores every candidate with

    X = Bw_hat + Bw * sqrt(2 * ln(C * T) / N)

and gives each subflow the argmax.  Paths unvisited for the 10 s observation
window fall back to their all-time maximum, which is what draws the manager
back to re-explore them.
"""

from __future__ import annotations

import math
from collections import deque

OBSERVED_TIME_US = 10_000_000
SMOOTHING_ALPHA = 0.9
SLOT_US = 1_000_000


class PathStats:
    __slots__ = ("id", "flowid", "Bw", "Bw_hat", "N", "maxBw_", "samples_", "bwSamples_")

    def __init__(self, path_id: int, flowid: int) -> None:
        self.id = path_id
        self.flowid = flowid
        self.Bw = 0.0
        self.Bw_hat = 0.0
        self.N = 1
        self.maxBw_ = 0.0
        self.samples_ = 0
        self.bwSamples_: deque = deque()  # (bw, timestamp_us)


class PathManager:
    """Bookkeeping plus selection over (subflow, candidate path) pairs."""

    def __init__(self, subflows, paths) -> None:
        """subflows: iterable of flow ids; paths: iterable of (path_id, flowid)."""
        self.subflows = list(subflows)
        self.paths = [PathStats(pid, fid) for pid, fid in paths]
        self.by_id = {p.id: p for p in self.paths}
        self.T = 1
        self.last_scores: dict[int, float] = {}
        explore = []
        slots = max((sum(1 for p in self.paths if p.flowid == fid) for fid in self.subflows),
                    default=0)
        for k in range(slots):
            round_choices = {}
            for fid in self.subflows:
                cands = sorted(p.id for p in self.paths if p.flowid == fid)
                round_choices[fid] = cands[k % len(cands)]
            explore.append(round_choices)
        self._exploration = explore

    def on_new_bandwidth_sample(self, path_id: int, bw: float, now: int) -> None:
        p = self.by_id[path_id]
        p.bwSamples_.append((bw, now))
        if p.samples_ == 0:
            p.Bw = bw
            p.maxBw_ = bw
            p.Bw_hat = bw
        else:
            p.Bw_hat = (1 - SMOOTHING_ALPHA) * p.Bw_hat + SMOOTHING_ALPHA * bw
        if bw > p.maxBw_:
            p.maxBw_ = bw
        self.delete_obsolete_samples(path_id, now)
        p.samples_ += 1

    def delete_obsolete_samples(self, path_id: int, now: int) -> None:
        p = self.by_id[path_id]
        samples = p.bwSamples_
        while len(samples) > 1:
            if now - samples[0][1] > OBSERVED_TIME_US:
                samples.popleft()
            else:
                break
        bw = 0.0
        for s_bw, _ in samples:
            if s_bw > bw:
                bw = s_bw
        p.Bw = bw
        if not samples:
            p.Bw = p.maxBw_

    def select_paths(self, now: int) -> dict[int, int]:
        """One scored decision round; -1 means no candidate had positive score."""
        for p in self.paths:
            self.delete_obsolete_samples(p.id, now)
        C = len(self.subflows)
        chosen = {}
        self.last_scores = {}
        for flowid in self.subflows:
            x_max = 0.0
            path_id = -1
            for p in self.paths:
                if p.flowid != flowid:
                    continue
                x = p.Bw_hat + p.Bw * math.sqrt(2 * math.log(C * self.T) / p.N)
                self.last_scores[p.id] = x
                if x > x_max:
                    x_max = x
                    path_id = p.id
            chosen[flowid] = path_id
            if path_id != -1:
                self.by_id[path_id].N += 1
        self.T += 1
        return chosen

    def decide(self, now: int) -> dict[int, int]:
        """Per-slot decision: forced initial exploration, then UCB rounds."""
        if self._exploration:
            chosen = self._exploration.pop(0)
            self.last_scores = {}
            for path_id in chosen.values():
                self.by_id[path_id].N += 1
            self.T += 1
            return chosen
        return self.select_paths(now)

    def exploring(self) -> bool:
        return bool(self._exploration)
