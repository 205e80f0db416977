"""Per-center job scheduling with load-based export, and transfer agents."""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .datalayer import FileRecord, LookupFailed, ReplicaCatalog
from .engine import Claim, SharedResource, SimulationAbort, Simulator

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.8


class JobType(str, enum.Enum):
    PRODUCTION = "production"
    REPRODUCTION = "reproduction"
    ANALYSIS = "analysis"
    GENERIC = "generic"


@dataclass(eq=False)
class Job:
    id: str
    type: str
    cpu_work: float  # operations
    origin: str
    submit_time: float = 0.0
    input_files: list[str] = field(default_factory=list)
    exported: bool = False
    center: str = ""
    t_start: float | None = None
    t_cpu: float | None = None
    t_end: float | None = None
    failed: bool = False
    on_done: Callable[["Job"], None] | None = None

    def __post_init__(self):
        if not self.cpu_work > 0:
            raise ValueError(f"job {self.id}: cpu_work must be positive")


class CpuFarm:
    """A center's CPUs as one shared resource; each job may use at most one CPU."""

    def __init__(self, sim: Simulator, center: str, cpus: int, cpu_rate: float):
        if cpus < 1 or not cpu_rate > 0:
            raise ValueError(f"farm {center}: need cpus >= 1 and cpu_rate > 0")
        self.center = center
        self.cpus = int(cpus)
        self.cpu_rate = float(cpu_rate)
        self.resource = SharedResource(sim, f"cpu:{center}", self.cpus * self.cpu_rate)
        self.queue: deque[Job] = deque()
        self.running: dict[str, Job] = {}

    @property
    def capacity(self) -> float:
        return self.resource.capacity

    @property
    def load(self) -> float:
        """Demand of dispatched plus queued jobs over farm capacity."""
        return (len(self.running) + len(self.queue)) * self.cpu_rate / self.capacity


class Scheduler:
    """Distributed scheduler: every center decides for itself.

    A job submitted where the farm load exceeds the center's threshold is sent
    to the least-loaded other center, provided that one is less loaded than
    the local farm.  Jobs then run FIFO; inputs not held at the executing
    center are fetched from the catalog's cheapest replica before the CPU
    phase starts.
    """

    def __init__(self, sim: Simulator, farms: Iterable[CpuFarm], catalog: ReplicaCatalog | None = None,
                 threshold: float = DEFAULT_THRESHOLD, thresholds: Mapping[str, float] | None = None,
                 export: bool = True):
        self.sim = sim
        self.farms = {f.center: f for f in farms}
        self.catalog = catalog
        self.threshold = threshold
        self.thresholds = dict(thresholds or {})
        self.export = export
        self.finished: list[Job] = []
        self.staged_bytes = 0.0

    def loads(self) -> dict[str, float]:
        return {c: f.load for c, f in self.farms.items()}

    def choose_center(self, center: str) -> tuple[str, bool]:
        """Where a job submitted at ``center`` should run, and whether that is an export."""
        farm = self.farms[center]
        local = farm.load
        if not self.export or local <= self.thresholds.get(center, self.threshold):
            return center, False
        others = [(f.load, c) for c, f in sorted(self.farms.items()) if c != center]
        if not others:
            return center, False
        best_load, best = min(others)
        if best_load >= local:
            return center, False
        return best, True

    def submit(self, job: Job, center: str | None = None) -> str:
        center = center or job.origin
        if center not in self.farms:
            raise SimulationAbort(f"job {job.id}: center {center} has no CPU farm")
        job.submit_time = self.sim.now
        target, exported = self.choose_center(center)
        job.center = target
        job.exported = exported
        farm = self.farms[target]
        farm.queue.append(job)
        self._dispatch(farm)
        return target

    def _dispatch(self, farm: CpuFarm) -> None:
        while farm.queue and len(farm.running) < farm.cpus:
            job = farm.queue.popleft()
            farm.running[job.id] = job
            job.t_start = self.sim.now
            self._stage(job, farm)

    def _stage(self, job: Job, farm: CpuFarm) -> None:
        missing = []
        if self.catalog is not None:
            for fid in job.input_files:
                if fid not in self.catalog.files:
                    self._fail(job, farm)
                    return
                if not self.catalog.holds_at(fid, farm.center):
                    missing.append(self.catalog.files[fid])
        if not missing:
            self._compute(job, farm)
            return
        left = [len(missing)]

        def arrived(_tr=None) -> None:
            left[0] -= 1
            if left[0] == 0:
                self._compute(job, farm)

        for f in missing:
            try:
                self.catalog.fetch(f, farm.center, arrived, purpose="staging")
            except LookupFailed:
                self._fail(job, farm)
                return
            self.staged_bytes += f.size

    def _compute(self, job: Job, farm: CpuFarm) -> None:
        job.t_cpu = self.sim.now
        farm.resource.join(Claim(job.id, job.cpu_work, cap=farm.cpu_rate,
                                 on_done=lambda _c: self._done(job, farm)))

    def _done(self, job: Job, farm: CpuFarm) -> None:
        job.t_end = self.sim.now
        del farm.running[job.id]
        self.finished.append(job)
        self._dispatch(farm)
        if job.on_done is not None:
            job.on_done(job)

    def _fail(self, job: Job, farm: CpuFarm) -> None:
        log.warning("job %s failed: input not available", job.id)
        job.failed = True
        job.t_end = self.sim.now
        farm.running.pop(job.id, None)
        self.finished.append(job)
        self.sim.at(self.sim.now, self._dispatch, farm)


# ---------------------------------------------------------------------------
# transfer agents
# ---------------------------------------------------------------------------

class PlanError(ValueError):
    pass


def check_plan(relays: Mapping[str, Iterable[str]]) -> None:
    """Reject relay maps where forwarding could loop back on itself."""
    graph = {r: sorted(set(d)) for r, d in relays.items()}
    for r, down in graph.items():
        if r in down:
            raise PlanError(f"relay {r} forwards to itself")
    state: dict[str, int] = {}

    def visit(node: str, stack: list[str]) -> None:
        state[node] = 1
        for nxt in graph.get(node, ()):
            if state.get(nxt) == 1:
                raise PlanError("relay cycle: " + " -> ".join(stack + [node, nxt]))
            if nxt in graph and state.get(nxt) is None:
                visit(nxt, stack + [node])
        state[node] = 2

    for r in sorted(graph):
        if state.get(r) is None:
            visit(r, [])


def plan_fanout(source: str, destinations: Iterable[str],
                relays: Mapping[str, Iterable[str]]) -> dict[str, list[str]]:
    """Forwarding tree for one file: node -> nodes it sends a copy to.

    A destination behind a relay is reached through that relay; the relay gets
    a copy even if it is not a destination itself.  Relays equal to the
    sending node are ignored, so their downstream nodes are served directly.
    """
    check_plan(relays)
    relays = {r: set(d) for r, d in relays.items()}
    tree: dict[str, list[str]] = {}

    def expand(node: str, targets: set[str], used: frozenset[str]) -> None:
        targets = targets - {node}
        if not targets:
            return
        sends: list[str] = []
        routed: set[str] = set()
        for relay in sorted(relays):
            if relay == node or relay in used:
                continue
            behind = (relays[relay] & targets) - routed - {relay}
            if behind:
                routed |= behind
                sends.append(relay)
                expand(relay, behind, used | {node, relay})
        for t in sorted(targets - routed):
            if t not in sends:
                sends.append(t)
        tree[node] = sends

    expand(source, set(destinations), frozenset())
    return tree


@dataclass
class FanoutRecord:
    file_id: str
    source: str
    destinations: list[str]
    started: float
    delivered: list[str] = field(default_factory=list)
    completed: float | None = None
    hops: int = 0

    def violations(self) -> list[str]:
        if self.completed is None:
            return []
        counts = Counter(self.delivered)
        out = []
        for d in self.destinations:
            if counts[d] != 1:
                out.append(f"{self.file_id}: {d} received {counts[d]} copies")
        extra = set(counts) - set(self.destinations)
        if extra:
            out.append(f"{self.file_id}: unexpected deliveries to {sorted(extra)}")
        return out


class TransferAgents:
    """Executes fan-outs hop by hop over the catalog/network."""

    def __init__(self, sim: Simulator, catalog: ReplicaCatalog, relays: Mapping[str, Iterable[str]] | None = None):
        check_plan(relays or {})
        self.sim = sim
        self.catalog = catalog
        self.relays = {r: list(d) for r, d in (relays or {}).items()}
        self.records: list[FanoutRecord] = []

    def fanout(self, f: FileRecord, source: str, destinations: Iterable[str],
               on_delivered: Callable[[FileRecord, str], None] | None = None,
               on_complete: Callable[[FanoutRecord], None] | None = None) -> FanoutRecord:
        dests = [d for d in destinations if d != source]
        rec = FanoutRecord(f.id, source, dests, self.sim.now)
        self.records.append(rec)
        wanted = set(dests)
        tree = plan_fanout(source, dests, self.relays)
        pending = [sum(len(v) for v in tree.values())]
        rec.hops = pending[0]
        if pending[0] == 0:
            rec.completed = self.sim.now
            if on_complete:
                on_complete(rec)
            return rec

        def send_from(node: str) -> None:
            for child in tree.get(node, ()):
                src = self.catalog.local_replica(f, node)
                dst_server = self.catalog.server_at(child)
                self.catalog.replicate(f, src, dst_server.id, landed, purpose="fanout")

        def landed(_f: FileRecord, dst_id: str) -> None:
            node = self.catalog.storages[dst_id].center
            if node in wanted:
                rec.delivered.append(node)
                if on_delivered:
                    on_delivered(f, node)
            send_from(node)
            pending[0] -= 1
            if pending[0] == 0:
                rec.completed = self.sim.now
                if on_complete:
                    on_complete(rec)

        send_from(source)
        return rec

    def audit(self) -> list[str]:
        out = []
        for r in self.records:
            out.extend(r.violations())
        return out
