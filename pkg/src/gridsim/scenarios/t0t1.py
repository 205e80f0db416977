"""Hierarchical T0/T1 grid: RAW replication, DST production, re-production
and the daily detector analysis, run on one topology.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import Counter

import numpy as np

from ..datalayer import DatabaseServer, FileClass, FileRecord, LookupFailed, MassStorage, ReplicaCatalog
from ..engine import Simulator
from ..harness.config import AnalysisCfg, ProductionCfg, RawReplicationCfg, ReproductionCfg, ScenarioCfg
from ..harness.metrics import ActivityRecord, MetricsCollector, RunResult
from ..network import FlowNetwork
from ..scheduling import CpuFarm, FanoutRecord, Job, JobType, Scheduler, TransferAgents
from .common import SizeDistribution, substream

log = logging.getLogger(__name__)

EVENT_BYTES = 1e6  # nominal size of one detector event, for event ranges
DAY = 86400.0


class Grid:
    """Topology, storage, farms and agents for one run."""

    def __init__(self, cfg: ScenarioCfg, record_trace: bool = False):
        self.cfg = cfg
        self.sim = Simulator(cfg.same_time_limit, record_trace)
        self.topology = cfg.topology.build()
        self.network = FlowNetwork(self.sim, self.topology, cfg.topology.window_bytes)
        servers, tapes, farms = [], [], []
        for c, cc in sorted(cfg.centers.items()):
            servers.append(DatabaseServer(self.sim, f"disk:{c}", c, cc.disk, cc.service_time, cc.parallelism))
            tapes.append(MassStorage(f"tape:{c}", c, cc.tape, cc.mount_latency))
            farms.append(CpuFarm(self.sim, c, cc.cpus, cc.cpu_rate))
        self.catalog = ReplicaCatalog(self.sim, self.network, servers, tapes)
        thresholds = {c: cc.threshold for c, cc in cfg.centers.items() if cc.threshold is not None}
        self.scheduler = Scheduler(self.sim, farms, self.catalog, cfg.scheduler.threshold,
                                   thresholds, cfg.scheduler.export)
        self.agents = TransferAgents(self.sim, self.catalog, cfg.agents.active_relays)
        self.metrics = MetricsCollector(self.sim, cfg.metrics_interval, self.network,
                                        {c: f.resource for c, f in self.scheduler.farms.items()},
                                        cfg.duration)
        self.activities: list[ActivityRecord] = []


class RawReplication:
    """RAW files appear at the source at the recording rate and go round robin to the T1s."""

    def __init__(self, grid: Grid, params: RawReplicationCfg, rng: np.random.Generator):
        self.grid = grid
        self.params = params
        self.rng = rng
        self.sizes = SizeDistribution(params.file_size.mean, params.file_size.relative_sd)
        self.files: list[FileRecord] = []
        self.created: list[float] = []  # parallel to files, for window queries
        self.assigned: list[str] = []
        self.delivered: Counter[tuple[str, str]] = Counter()
        self.listeners: list = []
        self._events = 0

    def start(self) -> None:
        self._next()

    def _next(self) -> None:
        size = float(max(1, round(self.sizes.sample(self.rng))))  # whole bytes
        # a file exists once its last byte is recorded
        self.grid.sim.after(size / self.params.recording_rate, self._created, size)

    def _created(self, size: float) -> None:
        g = self.grid
        i = len(self.files)
        n_events = max(1, int(round(size / EVENT_BYTES)))
        f = FileRecord(f"raw-{i:06d}", FileClass.RAW.value, size, g.sim.now, self.params.source,
                       (self._events, self._events + n_events - 1))
        self._events += n_events
        g.catalog.store(f, g.catalog.server_at(self.params.source).id)
        self.files.append(f)
        self.created.append(f.created_at)
        dest = self.params.destinations[i % len(self.params.destinations)]
        self.assigned.append(dest)
        src = g.catalog.local_replica(f, self.params.source)
        g.catalog.replicate(f, src, g.catalog.server_at(dest).id, self._landed, purpose="raw")
        for fn in self.listeners:
            fn(f)
        self._next()

    def _landed(self, f: FileRecord, dst_id: str) -> None:
        self.delivered[(f.id, self.grid.catalog.storages[dst_id].center)] += 1

    def window(self, lo: float, hi: float) -> list[FileRecord]:
        """Files created in [lo, hi)."""
        a = bisect.bisect_left(self.created, lo)
        b = bisect.bisect_left(self.created, hi)
        return self.files[a:b]

    def audit(self) -> list[str]:
        out = []
        dests = self.params.destinations
        for i, d in enumerate(self.assigned):
            if d != dests[i % len(dests)]:
                out.append(f"{self.files[i].id} assigned to {d}, expected {dests[i % len(dests)]}")
        counts = Counter(self.assigned)
        if self.assigned:
            k, r = divmod(len(self.assigned), len(dests))
            for j, d in enumerate(dests):
                want = k + (1 if j < r else 0)
                if counts[d] != want:
                    out.append(f"{d} assigned {counts[d]} RAW files, expected {want}")
        for (fid, center), n in sorted(self.delivered.items()):
            if n != 1:
                out.append(f"{fid} delivered {n} times to {center}")
        for f, d in zip(self.files, self.assigned):
            if self.delivered[(f.id, d)] == 0 and f.id in self.grid.catalog.files:
                # still in flight at the horizon is fine; a copy elsewhere is not
                if self.grid.catalog.holds_at(f.id, d):
                    out.append(f"{f.id} resident at {d} without a recorded delivery")
        return out


def _dst_size(raw: FileRecord, ratio: float, sd: float, rng: np.random.Generator) -> float:
    return float(max(1, round(SizeDistribution(raw.size * ratio, sd).sample(rng))))


def _fanout_destinations(configured: list[str], centers: list[str], source: str) -> list[str]:
    dests = configured or [c for c in centers if c != source]
    return [d for d in dests if d != source]


class Production:
    """One job per RAW file at T0; the resulting DST is fanned out to the T1s."""

    def __init__(self, grid: Grid, params: ProductionCfg, rng: np.random.Generator):
        self.grid = grid
        self.params = params
        self.rng = rng
        self.count = 0
        self.dst_files: list[FileRecord] = []
        self.fanouts: list[FanoutRecord] = []
        self.dests = _fanout_destinations(params.destinations, sorted(grid.cfg.centers), params.center)

    def on_raw(self, f: FileRecord) -> None:
        job = Job(f"prod-{self.count:06d}", JobType.PRODUCTION.value, self.params.cpu_work_per_raw,
                  self.params.center, input_files=[f.id], on_done=self._done)
        self.count += 1
        self.grid.scheduler.submit(job)

    def _done(self, job: Job) -> None:
        if job.failed:
            return
        g = self.grid
        raw = g.catalog.files[job.input_files[0]]
        size = _dst_size(raw, self.params.dst_ratio, self.params.dst_sd, self.rng)
        dst = FileRecord(f"dst-{job.id[5:]}", FileClass.DST.value, size, g.sim.now, job.center, raw.event_range)
        g.catalog.store(dst, g.catalog.server_at(job.center).id)
        self.dst_files.append(dst)
        dests = [d for d in self.dests if d != job.center]
        self.fanouts.append(g.agents.fanout(dst, job.center, dests))


class Reproduction:
    """At ``start_time`` every listed center reprocesses the RAW files it holds."""

    def __init__(self, grid: Grid, params: ReproductionCfg, raw: RawReplication, rng: np.random.Generator):
        self.grid = grid
        self.params = params
        self.raw = raw
        self.rng = rng
        self.campaigns: dict[str, dict] = {}
        self.work: Counter[str] = Counter()

    def start(self) -> None:
        if self.params.start_time <= self.grid.cfg.duration:
            self.grid.sim.at(self.params.start_time, self._begin)

    def _destinations(self, center: str) -> list[str]:
        dests = list(self.params.centers)
        if self.params.include_t0:
            dests.append(self.params.t0)
        return [d for d in dests if d != center]

    def _begin(self) -> None:
        g = self.grid
        now = g.sim.now
        for c in self.params.centers:
            local = [f for f in self.raw.files if g.catalog.holds_at(f.id, c)]
            camp = {"jobs": len(local), "fanouts": len(local), "bytes": 0.0}
            self.campaigns[c] = camp
            if not local:
                g.activities.append(ActivityRecord("reproduction", c, now, now, 0.0))
                continue
            for k, f in enumerate(local):
                job = Job(f"reprod-{c}-{k:06d}", JobType.REPRODUCTION.value, self.params.cpu_work_per_raw, c,
                          input_files=[f.id], on_done=lambda j, c=c: self._done(j, c))
                self.work[c] += job.cpu_work
                g.scheduler.submit(job)

    def _done(self, job: Job, center: str) -> None:
        g = self.grid
        camp = self.campaigns[center]
        camp["jobs"] -= 1
        if job.failed:
            camp["fanouts"] -= 1
            self._check(center)
            return
        raw = g.catalog.files[job.input_files[0]]
        size = _dst_size(raw, self.params.dst_ratio, self.params.dst_sd, self.rng)
        dst = FileRecord(f"rdst-{job.id[7:]}", FileClass.DST.value, size, g.sim.now, job.center,
                         raw.event_range)
        g.catalog.store(dst, g.catalog.server_at(job.center).id)
        rec = g.agents.fanout(dst, job.center, self._destinations(job.center),
                              on_complete=lambda r, c=center: self._fanned(r, c))
        camp["bytes"] += size * rec.hops

    def _fanned(self, rec: FanoutRecord, center: str) -> None:
        self.campaigns[center]["fanouts"] -= 1
        self._check(center)

    def _check(self, center: str) -> None:
        camp = self.campaigns[center]
        if camp["jobs"] == 0 and camp["fanouts"] == 0:
            self.grid.activities.append(ActivityRecord("reproduction", center, self.params.start_time,
                                                       self.grid.sim.now, camp["bytes"]))

    def pending(self) -> list[ActivityRecord]:
        done = {a.center for a in self.grid.activities if a.activity == "reproduction"}
        return [ActivityRecord("reproduction", c, self.params.start_time, None, camp["bytes"])
                for c, camp in sorted(self.campaigns.items()) if c not in done]


def analysis_triggers(params: AnalysisCfg, utc_offset: float, duration: float) -> list[float]:
    """Simulated times of local ``local_start`` for a center, within the run."""
    first = ((params.local_start_hours - utc_offset - params.start_utc_hours) % 24.0) * 3600.0
    out = []
    t = first
    while t <= duration:
        out.append(t)
        t += DAY
    return out


class DetectorAnalysis:
    """Daily gathering of the last ``window_hours`` of RAW data at each analysis center."""

    def __init__(self, grid: Grid, params: AnalysisCfg, raw: RawReplication):
        self.grid = grid
        self.params = params
        self.raw = raw
        self.runs: list[dict] = []

    def start(self) -> None:
        g = self.grid
        for c in self.params.centers:
            for t in analysis_triggers(self.params, g.cfg.centers[c].utc_offset, g.cfg.duration):
                g.sim.at(t, self._trigger, c)

    def _trigger(self, center: str) -> None:
        g = self.grid
        now = g.sim.now
        window = self.params.window_hours * 3600.0
        files = [f for f in self.raw.window(now - window, now) if not g.catalog.holds_at(f.id, center)]
        run = {"center": center, "trigger": now, "files": [f.id for f in files], "left": len(files),
               "queue": list(files), "active": 0, "bytes": 0.0, "done": None}
        self.runs.append(run)
        if not files:
            run["done"] = now
            g.activities.append(ActivityRecord("analysis", center, now, now, 0.0))
            return
        self._pump(run)

    def _pump(self, run: dict) -> None:
        g = self.grid
        limit = self.params.max_parallel or math.inf
        while run["queue"] and run["active"] < limit:
            f = run["queue"].pop(0)
            run["active"] += 1
            try:
                g.catalog.fetch(f, run["center"], lambda _tr, f=f: self._arrived(run, f), purpose="analysis")
            except LookupFailed:
                log.warning("analysis at %s: %s has no replica", run["center"], f.id)
                self._arrived(run, None)

    def _arrived(self, run: dict, f: FileRecord | None) -> None:
        run["active"] -= 1
        run["left"] -= 1
        if f is not None:
            run["bytes"] += f.size
        if run["left"] == 0:
            run["done"] = self.grid.sim.now
            self.grid.activities.append(ActivityRecord("analysis", run["center"], run["trigger"],
                                                       run["done"], run["bytes"]))
        else:
            self._pump(run)

    def pending(self) -> list[ActivityRecord]:
        return [ActivityRecord("analysis", r["center"], r["trigger"], None, r["bytes"])
                for r in self.runs if r["done"] is None]


def _link_integrity(grid: Grid) -> list[str]:
    """Bits counted on every channel equal the bits of transfers that crossed it."""
    net = grid.network
    expected = net.in_flight_bits()
    topo = net.topology
    for r in net.records:
        p = topo.path(r.src, r.dst)
        if p.size:
            expected[p] += r.size * 8.0
    out = []
    for i, name in enumerate(topo.channels):
        got = net.bits[i]
        if abs(got - expected[i]) > 1e-6 * max(1.0, expected[i]):
            out.append(f"{name}: counted {got:.6g} bits, transfers account for {expected[i]:.6g}")
    return out


def run_t0t1(cfg: ScenarioCfg, record_trace: bool = False) -> RunResult:
    grid = Grid(cfg, record_trace)
    acts = cfg.activities
    raw = RawReplication(grid, acts.raw_replication, substream(cfg.seed, "raw_replication"))
    production = reproduction = analysis = None
    if acts.raw_replication.enabled:
        raw.start()
    if acts.production.enabled:
        production = Production(grid, acts.production, substream(cfg.seed, "production"))
        raw.listeners.append(production.on_raw)
    if acts.reproduction.enabled:
        reproduction = Reproduction(grid, acts.reproduction, raw, substream(cfg.seed, "reproduction"))
        reproduction.start()
    if acts.analysis.enabled:
        analysis = DetectorAnalysis(grid, acts.analysis, raw)
        analysis.start()
    grid.metrics.start()

    report = grid.sim.run_until(cfg.duration)
    grid.network.advance(cfg.duration)
    for farm in grid.scheduler.farms.values():
        farm.resource.update(cfg.duration)
    grid.metrics.flush(cfg.duration)

    activities = list(grid.activities)
    for gen in (reproduction, analysis):
        if gen is not None:
            activities.extend(gen.pending())
    activities.sort(key=lambda a: (a.trigger_time, a.activity, a.center))

    jobs = [j for j in grid.scheduler.finished if not j.failed]
    net = grid.network
    audits = {
        "byte_conservation": [f"{net.conservation_violations} transfers violated byte conservation"]
        if net.conservation_violations else [],
        "link_integrity": _link_integrity(grid),
        "exactly_once": grid.agents.audit(),
        "catalog": grid.catalog.audit(),
        "round_robin": raw.audit() if acts.raw_replication.enabled else [],
    }
    link_totals = {name: (float(net.bits[i]), float(net.capacity_integral[i]))
                   for i, name in enumerate(net.topology.channels)}
    cpu_totals = {c: (f.resource.busy_integral, f.resource.capacity_integral)
                  for c, f in sorted(grid.scheduler.farms.items())}
    extra = {
        "raw_files": len(raw.files),
        "dst_files": len(production.dst_files) if production else 0,
        "jobs_finished": len(jobs),
        "jobs_failed": sum(1 for j in grid.scheduler.finished if j.failed),
        "jobs_exported": sum(1 for j in jobs if j.exported),
        "tape_migrations": len(grid.catalog.moves),
        "tape_reads": grid.catalog.tape_reads,
        "fanouts": len(grid.agents.records),
        "fanouts_complete": sum(1 for r in grid.agents.records if r.completed is not None),
    }
    if reproduction is not None:
        for c in sorted(reproduction.work):
            extra[f"reproduction_work_{c}"] = reproduction.work[c]
    return RunResult(
        kind="t0t1", report=report.as_dict(), duration=cfg.duration, transfers=list(net.records),
        jobs=jobs, activities=activities, links=grid.metrics.links, cpu=grid.metrics.cpu,
        audits=audits, link_totals=link_totals, cpu_totals=cpu_totals, extra=extra,
    )
