"""Shared C2C link arbitration and per-instance utilization sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


@dataclass
class C2cLinkState:
    total_bandwidth: float
    active_streams: dict[int, float] = field(default_factory=dict)
    epoch: float = 0.0
    weights: dict[int, float] | None = None

    def __post_init__(self):
        if not self.total_bandwidth > 0:
            raise ValueError("link bandwidth must be positive")
        for sid, demand in self.active_streams.items():
            if demand < 0 or math.isnan(demand):
                raise ValueError(f"stream {sid}: demand must be >= 0")


def allocate(link: C2cLinkState) -> dict[int, float]:
    """Max-min fair water-filling.

    Streams whose demand fits under the current fair share are satisfied and
    removed; the leftover is re-divided among the rest. With ``link.weights``
    set, fair shares are proportional to the weights (default 1 each).
    """
    grants = {sid: 0.0 for sid in link.active_streams}
    weight = {sid: (link.weights or {}).get(sid, 1.0) for sid in link.active_streams}
    pending = sorted((sid for sid, d in link.active_streams.items() if d > 0))
    capacity = link.total_bandwidth
    while pending:
        wsum = sum(weight[s] for s in pending)
        fits = [s for s in pending if link.active_streams[s] <= capacity * weight[s] / wsum]
        if not fits:
            for s in pending:
                grants[s] = capacity * weight[s] / wsum
            break
        for s in fits:
            grants[s] = link.active_streams[s]
            capacity -= grants[s]
        pending = [s for s in pending if s not in fits]
    return grants


def interference_gap(solo_throughputs, corun_throughput: float) -> float:
    """``1 - corun / sum(solo)``, clamped at zero."""
    solo = list(solo_throughputs)
    if not solo or any(s <= 0 for s in solo):
        raise ValueError("solo throughputs must be positive")
    gap = 1.0 - corun_throughput / sum(solo)
    if gap < 0:
        log.warning("co-run throughput %.6g exceeds solo sum %.6g; gap clamped to 0", corun_throughput, sum(solo))
        return 0.0
    return gap


@dataclass(frozen=True)
class BandwidthSample:
    u_hbm: float
    u_c2c: float
    window: float


class UtilizationMeter:
    """Accumulates per-instance byte counts and the C2C share each instance
    could have used, then turns them into utilization over a window."""

    def __init__(self, hbm_bandwidth: dict[int, float]):
        self.hbm_bandwidth = dict(hbm_bandwidth)
        self._c2c = {i: 0.0 for i in self.hbm_bandwidth}
        self._hbm = {i: 0.0 for i in self.hbm_bandwidth}
        self._avail = {i: 0.0 for i in self.hbm_bandwidth}
        self.elapsed = {i: 0.0 for i in self.hbm_bandwidth}

    def record(self, instance_id: int, dt: float, c2c_rate: float, hbm_rate: float, available_c2c: float):
        self._c2c[instance_id] += c2c_rate * dt
        self._hbm[instance_id] += hbm_rate * dt
        self._avail[instance_id] += available_c2c * dt
        self.elapsed[instance_id] += dt

    def sample_utilization(self, instance_id: int, window: float) -> BandwidthSample:
        if not window > 0:
            raise ValueError("window must be positive")
        if self.elapsed[instance_id] < window * (1 - 1e-9):
            raise ValueError(f"instance {instance_id}: only {self.elapsed[instance_id]:.6g} s recorded")
        avail = self._avail[instance_id]
        u_c2c = self._c2c[instance_id] / avail if avail > 0 else 0.0
        u_hbm = self._hbm[instance_id] / (self.hbm_bandwidth[instance_id] * window)
        self._c2c[instance_id] = self._hbm[instance_id] = self._avail[instance_id] = 0.0
        self.elapsed[instance_id] = 0.0
        return BandwidthSample(min(1.0, u_hbm), min(1.0, u_c2c), window)
