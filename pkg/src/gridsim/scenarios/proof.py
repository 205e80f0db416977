"""PROOF-style cluster: masters hand out work packets, slave processes pull them.

Every slave process loops: ask its master for a packet, get the packet's data
(local disk, or a data server followed by a LAN transfer), compute on its
station's CPU (shared with the other processes placed there), return the
partial result.  A master answers one message at a time.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..datalayer import DatabaseServer
from ..engine import Claim, SharedResource, Simulator
from ..harness.config import ProofCfg, ScenarioCfg
from ..harness.metrics import ActivityRecord, MetricsCollector, RunResult
from ..network import FlowNetwork, Link, Topology
from ..scheduling import Job, JobType
from .common import substream

SWITCH = "LAN"


class SequentialHandler:
    """Processes messages one at a time, ``handle_time`` seconds each, in arrival order."""

    def __init__(self, sim: Simulator, name: str, handle_time: float):
        self.sim = sim
        self.name = name
        self.handle_time = float(handle_time)
        self.queue: deque[tuple[Callable, tuple]] = deque()
        self.busy = False
        self.handled = 0
        self.max_queue = 0

    def send(self, fn: Callable, *args) -> None:
        self.queue.append((fn, args))
        self.max_queue = max(self.max_queue, len(self.queue) - 1)  # head is in service
        if not self.busy:
            self._next()

    def _next(self) -> None:
        fn, args = self.queue[0]
        self.busy = True
        self.sim.after(self.handle_time, self._done, fn, args)

    def _done(self, fn: Callable, args: tuple) -> None:
        self.queue.popleft()
        self.handled += 1
        self.busy = False
        if self.queue:
            self._next()
        fn(*args)


@dataclass(eq=False)
class Request:
    id: str
    master: int
    submitted: float
    n_events: int
    packets: deque = field(default_factory=deque)  # (index, events) not yet handed out
    outstanding: int = 0
    returned: dict[int, int] = field(default_factory=dict)  # packet index -> events
    bytes_fetched: float = 0.0
    completed: float | None = None


@dataclass(eq=False)
class SlaveProcess:
    id: str
    master: int
    station: int
    waiting: bool = True  # idle until its master has an open request


def station_of(master: int, k: int, spm: int, m: int) -> int:
    """Station of process ``k`` of ``master``: consecutive blocks, wrapping around."""
    return (master * spm + k) % m


class ProofCluster:
    def __init__(self, cfg: ScenarioCfg, record_trace: bool = False):
        p: ProofCfg = cfg.proof
        self.cfg = cfg
        self.p = p
        self.sim = Simulator(cfg.same_time_limit, record_trace)
        self.stations = [f"station-{i:03d}" for i in range(p.m_slaves)]
        self.server_nodes = [f"server-{i}" for i in range(p.s_servers)]
        links = [Link(f"{s}-lan", s, SWITCH, p.lan_bps) for s in self.stations]
        links += [Link(f"{s}-lan", s, SWITCH, p.server_lan_bps or p.lan_bps) for s in self.server_nodes]
        self.network = FlowNetwork(self.sim, Topology([SWITCH, *self.stations, *self.server_nodes], links))
        self.servers = [DatabaseServer(self.sim, s, s, math.inf, p.server_service_time, p.server_parallelism)
                        for s in self.server_nodes]
        self.cpus = [SharedResource(self.sim, f"cpu:{s}", p.cpu_rate) for s in self.stations]
        self.masters = [SequentialHandler(self.sim, f"master-{j}", p.master_handle_time)
                        for j in range(p.n_masters)]
        self.processes = [[SlaveProcess(f"m{j:02d}-p{k:03d}", j, station_of(j, k, p.slaves_per_master, p.m_slaves))
                           for k in range(p.slaves_per_master)] for j in range(p.n_masters)]
        self.current: list[Request | None] = [None] * p.n_masters
        self.served = [0] * p.n_masters
        self.requests: list[Request] = []
        self.activities: list[ActivityRecord] = []
        self.jobs: list[Job] = []
        self.local_hits = 0
        self.remote_fetches = 0
        self.rng_local = substream(cfg.seed, "proof.locality")
        self.rng_think = substream(cfg.seed, "proof.think")
        self.metrics = MetricsCollector(self.sim, cfg.metrics_interval, self.network,
                                        {s: c for s, c in zip(self.stations, self.cpus)}, cfg.duration)
        self.problems: list[str] = []

    # -- clients ----------------------------------------------------------------

    def start(self) -> None:
        for j in range(self.p.n_masters):
            self.sim.at(0.0, self._submit, j)
        self.metrics.start()

    def _submit(self, j: int) -> None:
        p = self.p
        r = Request(f"req-m{j:02d}-{self.served[j]:04d}", j, self.sim.now, p.events_per_request)
        full, rest = divmod(p.events_per_request, p.packet_events)
        sizes = [p.packet_events] * full + ([rest] if rest else [])
        r.packets.extend(enumerate(sizes))
        self.served[j] += 1
        self.requests.append(r)
        # the master reads the request, then wakes its slave processes
        self.masters[j].send(self._open, r)

    def _open(self, r: Request) -> None:
        self.current[r.master] = r
        for proc in self.processes[r.master]:
            if proc.waiting:
                proc.waiting = False
                self.masters[r.master].send(self._assign, proc)

    # -- master -------------------------------------------------------------------

    def _assign(self, proc: SlaveProcess) -> None:
        r = self.current[proc.master]
        if r is None or not r.packets:
            proc.waiting = True
            return
        idx, events = r.packets.popleft()
        r.outstanding += 1
        job = Job(f"{r.id}-pkt{idx:04d}", JobType.ANALYSIS.value,
                  self.p.request_cpu_work * events / self.p.events_per_request, f"master-{proc.master}",
                  submit_time=self.sim.now, center=self.stations[proc.station])
        self.jobs.append(job)
        if self.rng_local.random() < self.p.p_local:
            self.local_hits += 1
            self._compute(proc, r, idx, events, job)
        else:
            self.remote_fetches += 1
            server = self._pick_server(idx)
            server.request(self._serve, server, proc, r, idx, events, job)

    def _pick_server(self, idx: int) -> DatabaseServer:
        s = self.p.s_servers
        holders = [self.servers[(idx + k) % s] for k in range(self.p.server_replicas)]
        return min(holders, key=lambda sv: (sv.pending, sv.id))

    def _serve(self, server: DatabaseServer, proc: SlaveProcess, r: Request, idx: int, events: int,
               job: Job) -> None:
        size = events * self.p.event_size_bytes
        r.bytes_fetched += size
        self.network.start_transfer(job.id, size, server.id, self.stations[proc.station],
                                    lambda _tr: self._compute(proc, r, idx, events, job),
                                    cls="DST", purpose="proof")

    def _compute(self, proc: SlaveProcess, r: Request, idx: int, events: int, job: Job) -> None:
        job.t_start = job.t_cpu = self.sim.now
        self.cpus[proc.station].join(Claim(job.id, job.cpu_work,
                                           on_done=lambda _c: self._computed(proc, r, idx, events, job)))

    def _computed(self, proc: SlaveProcess, r: Request, idx: int, events: int, job: Job) -> None:
        job.t_end = self.sim.now
        self.masters[proc.master].send(self._result, proc, r, idx, events)

    def _result(self, proc: SlaveProcess, r: Request, idx: int, events: int) -> None:
        if idx in r.returned:
            self.problems.append(f"{r.id}: packet {idx} returned twice")
        r.returned[idx] = events
        r.outstanding -= 1
        if not r.packets and r.outstanding == 0:
            self._finish(r)
        # the slave immediately asks for more work
        self.masters[proc.master].send(self._assign, proc)

    def _finish(self, r: Request) -> None:
        r.completed = self.sim.now
        self.current[r.master] = None
        done = sum(r.returned.values())
        if done != r.n_events:
            self.problems.append(f"{r.id}: processed {done} events, dataset has {r.n_events}")
        self.activities.append(ActivityRecord("proof_request", f"master-{r.master}", r.submitted,
                                              r.completed, r.bytes_fetched))
        p = self.p
        if p.mode == "repeated" and self.served[r.master] < p.requests_per_master:
            think = self.rng_think.exponential(p.think_time_mean) if p.think_time_mean > 0 else 0.0
            if self.sim.now + think <= self.cfg.duration:
                self.sim.after(think, self._submit, r.master)


def _link_integrity(net: FlowNetwork) -> list[str]:
    expected = net.in_flight_bits()
    for r in net.records:
        path = net.topology.path(r.src, r.dst)
        expected[path] += r.size * 8.0
    return [f"{name}: counted {net.bits[i]:.6g} bits, transfers account for {expected[i]:.6g}"
            for i, name in enumerate(net.topology.channels)
            if abs(net.bits[i] - expected[i]) > 1e-6 * max(1.0, expected[i])]


def run_proof(cfg: ScenarioCfg, record_trace: bool = False) -> RunResult:
    cl = ProofCluster(cfg, record_trace)
    cl.start()
    report = cl.sim.run_until(cfg.duration)
    cl.network.advance(cfg.duration)
    for c in cl.cpus:
        c.update(cfg.duration)
    cl.metrics.flush(cfg.duration)

    activities = list(cl.activities)
    activities += [ActivityRecord("proof_request", f"master-{r.master}", r.submitted, None, r.bytes_fetched)
                   for r in cl.requests if r.completed is None]
    activities.sort(key=lambda a: (a.trigger_time, a.center))
    finished = [r for r in cl.requests if r.completed is not None]
    busy = sum(c.busy_integral for c in cl.cpus)
    capi = sum(c.capacity_integral for c in cl.cpus)
    net = cl.network
    assigned = cl.local_hits + cl.remote_fetches
    extra = {
        "requests": len(cl.requests),
        "requests_completed": len(finished),
        "makespan_s": max((r.completed for r in finished), default=float("nan")),
        "mean_request_time_s": (sum(r.completed - r.submitted for r in finished) / len(finished)
                                if finished else float("nan")),
        "avg_cpu_utilization": busy / capi if capi > 0 else 0.0,
        "packets_assigned": assigned,
        "local_hits": cl.local_hits,
        "remote_fetches": cl.remote_fetches,
        "server_requests": sum(s.served for s in cl.servers),
        "server_max_queue": max(s.max_queue for s in cl.servers),
        "master_messages": sum(m.handled for m in cl.masters),
        "master_max_queue": max(m.max_queue for m in cl.masters),
    }
    audits = {
        "byte_conservation": [f"{net.conservation_violations} transfers violated byte conservation"]
        if net.conservation_violations else [],
        "link_integrity": _link_integrity(net),
        "work_conservation": list(cl.problems),
    }
    jobs = [j for j in cl.jobs if j.t_end is not None]
    link_totals = {name: (float(net.bits[i]), float(net.capacity_integral[i]))
                   for i, name in enumerate(net.topology.channels)}
    cpu_totals = {s: (c.busy_integral, c.capacity_integral) for s, c in zip(cl.stations, cl.cpus)}
    return RunResult(kind="proof", report=report.as_dict(), duration=cfg.duration, transfers=list(net.records),
                     jobs=jobs, activities=activities, links=cl.metrics.links, cpu=cl.metrics.cpu,
                     audits=audits, link_totals=link_totals, cpu_totals=cpu_totals, extra=extra)
