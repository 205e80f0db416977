"""Windowed link and CPU metrics, integrated exactly from resource state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..engine import SharedResource, Simulator
from ..network import FlowNetwork


@dataclass
class LinkSample:
    t_end: float
    link_id: str
    avg_rate_bps: float
    utilization: float


@dataclass
class CpuSample:
    t_end: float
    center: str
    utilization: float


@dataclass
class ActivityRecord:
    activity: str
    center: str
    trigger_time: float
    completion_time: float | None
    bytes_moved: float


class MetricsCollector:
    """Samples every ``interval`` seconds of simulated time.

    Values are integrals over the window divided by its length, taken from the
    same state the event loop advances, so nothing is lost between samples.
    """

    def __init__(self, sim: Simulator, interval: float, network: FlowNetwork | None,
                 cpus: Mapping[str, SharedResource], horizon: float):
        self.sim = sim
        self.interval = float(interval)
        self.network = network
        self.cpus = dict(cpus)
        self.horizon = float(horizon)
        self.links: list[LinkSample] = []
        self.cpu: list[CpuSample] = []
        self._last_t = 0.0
        nch = len(network.topology.channels) if network else 0
        self._last_bits = np.zeros(nch)
        self._last_cap = np.zeros(nch)
        self._last_busy = {k: 0.0 for k in self.cpus}
        self._last_capi = {k: 0.0 for k in self.cpus}

    def start(self) -> None:
        if self.interval <= self.horizon:
            self.sim.at(self.interval, self._tick)

    def _tick(self) -> None:
        self.sample(self.sim.now)
        nxt = self.sim.now + self.interval
        if nxt <= self.horizon:
            self.sim.at(nxt, self._tick)

    def flush(self, t_end: float) -> None:
        if t_end > self._last_t:
            self.sample(t_end)

    def sample(self, t: float) -> None:
        width = t - self._last_t
        if width <= 0:
            return
        if self.network is not None:
            self.network.advance(t)
            bits = self.network.bits.copy()
            capi = self.network.capacity_integral.copy()
            dbits = bits - self._last_bits
            dcap = capi - self._last_cap
            for i, name in enumerate(self.network.topology.channels):
                util = dbits[i] / dcap[i] if dcap[i] > 0 else 0.0
                self.links.append(LinkSample(t, name, dbits[i] / width, min(max(util, 0.0), 1.0)))
            self._last_bits, self._last_cap = bits, capi
        for name, res in self.cpus.items():
            res.update(t)
            dbusy = res.busy_integral - self._last_busy[name]
            dcap = res.capacity_integral - self._last_capi[name]
            util = dbusy / dcap if dcap > 0 else 0.0
            self.cpu.append(CpuSample(t, name, min(max(util, 0.0), 1.0)))
            self._last_busy[name] = res.busy_integral
            self._last_capi[name] = res.capacity_integral
        self._last_t = t


@dataclass
class RunResult:
    """Everything a finished run hands to the output writer."""

    kind: str
    report: dict
    duration: float
    transfers: list = field(default_factory=list)     # network.TransferRecord
    jobs: list = field(default_factory=list)          # rows for jobs.csv
    activities: list[ActivityRecord] = field(default_factory=list)
    links: list[LinkSample] = field(default_factory=list)
    cpu: list[CpuSample] = field(default_factory=list)
    audits: dict[str, list[str]] = field(default_factory=dict)
    link_totals: dict[str, tuple[float, float]] = field(default_factory=dict)  # channel -> (bits, cap-seconds)
    cpu_totals: dict[str, tuple[float, float]] = field(default_factory=dict)   # center -> (work, cap-seconds)
    extra: dict[str, float | int | str] = field(default_factory=dict)
