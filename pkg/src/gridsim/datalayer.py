"""Files, disk servers, tape stores and the replica catalog."""

from __future__ import annotations

import enum
import logging
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .engine import SimulationAbort, Simulator
from .network import FlowNetwork, Transfer

log = logging.getLogger(__name__)


class FileClass(str, enum.Enum):
    RAW = "RAW"
    DST = "DST"


class LookupFailed(LookupError):
    """No replica of a file is registered anywhere."""


@dataclass(eq=False)
class FileRecord:
    id: str
    cls: str
    size: float  # bytes
    created_at: float
    origin: str = ""
    event_range: tuple[int, int] = (0, 0)
    replicas: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError(f"file {self.id}: size must be positive")


class Storage:
    kind = "storage"

    def __init__(self, id: str, center: str, capacity: float = math.inf):
        self.id = id
        self.center = center
        self.capacity = float(capacity)
        self.used = 0.0
        self.resident: OrderedDict[str, float] = OrderedDict()  # file id -> size, LRU first

    @property
    def free(self) -> float:
        return self.capacity - self.used

    def holds(self, file_id: str) -> bool:
        return file_id in self.resident

    def put(self, f: FileRecord) -> None:
        if f.id in self.resident:
            self.resident.move_to_end(f.id)
            return
        self.resident[f.id] = f.size
        self.used += f.size

    def remove(self, f: FileRecord) -> None:
        self.used -= self.resident.pop(f.id)
        if abs(self.used) < 1e-6:
            self.used = 0.0

    def touch(self, file_id: str) -> None:
        if file_id in self.resident:
            self.resident.move_to_end(file_id)


class MassStorage(Storage):
    kind = "tape"

    def __init__(self, id: str, center: str, capacity: float = math.inf, mount_latency: float = 0.0):
        super().__init__(id, center, capacity)
        self.mount_latency = float(mount_latency)


class DatabaseServer(Storage):
    """Disk server.  Read requests are served FIFO, ``parallelism`` at a time."""

    kind = "disk"

    def __init__(self, sim: Simulator, id: str, center: str, capacity: float = math.inf,
                 service_time: float = 0.0, parallelism: int = 1):
        super().__init__(id, center, capacity)
        if parallelism < 1:
            raise ValueError(f"server {id}: parallelism must be >= 1")
        self.sim = sim
        self.service_time = float(service_time)
        self.parallelism = int(parallelism)
        self.busy = 0
        self.waiting: deque[tuple[Callable, tuple]] = deque()
        self.served = 0
        self.max_queue = 0

    @property
    def pending(self) -> int:
        return self.busy + len(self.waiting)

    def queue_delay(self) -> float:
        """Queueing delay estimate: pending requests times service time."""
        return self.pending * self.service_time / self.parallelism

    def request(self, fn: Callable, *args) -> None:
        if self.busy < self.parallelism:
            self.busy += 1
            self.sim.after(self.service_time, self._served, fn, args)
        else:
            self.waiting.append((fn, args))
            self.max_queue = max(self.max_queue, len(self.waiting))

    def _served(self, fn: Callable, args: tuple) -> None:
        self.served += 1
        if self.waiting:
            nfn, nargs = self.waiting.popleft()
            self.sim.after(self.service_time, self._served, nfn, nargs)
        else:
            self.busy -= 1
        fn(*args)


@dataclass
class Move:
    file_id: str
    src: str
    dst: str
    size: float


class ReplicaCatalog:
    """Where every file lives, and how to get it somewhere else.

    Disk servers evict least-recently-used files to the mass store of their
    center when a new file would not fit.  Tape replicas are staged back to
    the center's disk server before they are read.
    """

    def __init__(self, sim: Simulator, network: FlowNetwork | None,
                 servers: Iterable[DatabaseServer] = (), tapes: Iterable[MassStorage] = ()):
        self.sim = sim
        self.network = network
        self.files: dict[str, FileRecord] = {}
        self.storages: dict[str, Storage] = {}
        self.disk_at: dict[str, DatabaseServer] = {}
        self.tape_at: dict[str, MassStorage] = {}
        self.moves: list[Move] = []
        self.tape_reads = 0
        for s in servers:
            self.add_storage(s)
        for t in tapes:
            self.add_storage(t)

    def add_storage(self, st: Storage) -> None:
        if st.id in self.storages:
            raise ValueError(f"duplicate storage id {st.id}")
        self.storages[st.id] = st
        if isinstance(st, DatabaseServer):
            self.disk_at.setdefault(st.center, st)
        elif isinstance(st, MassStorage):
            self.tape_at.setdefault(st.center, st)

    def server_at(self, center: str) -> DatabaseServer:
        try:
            return self.disk_at[center]
        except KeyError:
            raise SimulationAbort(f"center {center} has no database server") from None

    def holds_at(self, file_id: str, center: str) -> bool:
        f = self.files[file_id]
        return any(self.storages[s].center == center for s in f.replicas)

    # -- placement ------------------------------------------------------------

    def store(self, f: FileRecord, server_id: str, replicate_to: Iterable[str] = (),
              on_replicated: Callable[[FileRecord, str], None] | None = None) -> None:
        """Make ``f`` resident on ``server_id``; optionally copy it to other servers."""
        server = self.storages.get(server_id)
        if server is None:
            raise SimulationAbort(f"store {f.id}: unknown server {server_id}")
        self.files.setdefault(f.id, f)
        self._place(f, server)
        for target in replicate_to:
            self.replicate(f, server_id, target, on_replicated)

    def _place(self, f: FileRecord, st: Storage) -> None:
        if st.holds(f.id):
            st.touch(f.id)
            f.replicas.add(st.id)
            return
        if isinstance(st, DatabaseServer):
            tape = self.tape_at.get(st.center)
            room = st.capacity + (tape.free if tape is not None else 0.0)
            if f.size > st.capacity or f.size > room:
                raise SimulationAbort(
                    f"file {f.id} ({f.size:.0f} B) does not fit at center {st.center}"
                )
            if f.size > st.free:
                self.migrate(st, f.size)
        elif f.size > st.free:
            raise SimulationAbort(f"mass storage {st.id} is full")
        st.put(f)
        f.replicas.add(st.id)

    def migrate(self, server: DatabaseServer, needed: float) -> list[Move]:
        """Push least-recently-used files to tape until ``needed`` bytes are free."""
        moves: list[Move] = []
        if needed <= server.free:
            return moves
        tape = self.tape_at.get(server.center)
        if tape is None:
            raise SimulationAbort(f"server {server.id} is full and center {server.center} has no mass storage")
        while server.free < needed and server.resident:
            fid = next(iter(server.resident))
            f = self.files[fid]
            if not tape.holds(fid):
                if f.size > tape.free:
                    raise SimulationAbort(f"mass storage {tape.id} is full while migrating {fid}")
                tape.put(f)
                f.replicas.add(tape.id)
            server.remove(f)
            f.replicas.discard(server.id)
            mv = Move(fid, server.id, tape.id, f.size)
            moves.append(mv)
            self.moves.append(mv)
        return moves

    def replicate(self, f: FileRecord, src_id: str, dst_id: str,
                  on_done: Callable[[FileRecord, str], None] | None = None,
                  purpose: str = "replication") -> None:
        """Read ``f`` from ``src_id`` and store the copy on ``dst_id`` when it lands."""
        dst = self.storages[dst_id]

        def landed(_tr: Transfer | None = None) -> None:
            self._place(f, dst)
            if on_done is not None:
                on_done(f, dst_id)

        self.read(f, src_id, dst.center, landed, purpose)

    # -- lookup ---------------------------------------------------------------

    def local_replica(self, f: FileRecord, center: str) -> str:
        """Replica of ``f`` at ``center``, disk before tape."""
        disk = self.disk_at.get(center)
        if disk is not None and disk.holds(f.id):
            return disk.id
        tape = self.tape_at.get(center)
        if tape is not None and tape.holds(f.id):
            return tape.id
        for sid in sorted(f.replicas):
            if self.storages[sid].center == center:
                return sid
        raise LookupFailed(f"file {f.id} has no replica at {center}")

    def _replicas(self, f: FileRecord) -> list[Storage]:
        if not f.replicas:
            raise LookupFailed(f"file {f.id} has no replica")
        return [self.storages[s] for s in sorted(f.replicas)]

    def find_closest(self, f: FileRecord, center: str) -> str:
        topo = self.network.topology
        best = min(self._replicas(f), key=lambda st: (topo.rtt(st.center, center), st.id))
        return best.id

    def cost(self, f: FileRecord, storage_id: str, center: str) -> float:
        """Estimated seconds until ``f`` from ``storage_id`` is at ``center``."""
        st = self.storages[storage_id]
        if st.center == center:
            wire = 0.0
        else:
            rate = self.network.estimate_rate(st.center, center)
            wire = f.size * 8.0 / rate if rate > 0 else math.inf
        if isinstance(st, MassStorage):
            server = self.disk_at.get(st.center)
            return wire + st.mount_latency + (server.queue_delay() if server else 0.0)
        if isinstance(st, DatabaseServer):
            return wire + st.queue_delay()
        return wire

    def find_optimal(self, f: FileRecord, center: str) -> str:
        topo = self.network.topology
        best = min(
            self._replicas(f),
            key=lambda st: (self.cost(f, st.id, center), topo.rtt(st.center, center), st.id),
        )
        return best.id

    # -- reads ----------------------------------------------------------------

    def read(self, f: FileRecord, storage_id: str, center: str,
             on_ready: Callable[..., None], purpose: str = "read") -> None:
        """Deliver ``f`` from a given replica to ``center``.

        Tape replicas are mounted and staged onto the local disk server first.
        ``on_ready`` receives the network transfer (None for a local read).
        """
        st = self.storages[storage_id]
        if isinstance(st, MassStorage):
            self.tape_reads += 1
            server = self.server_at(st.center)

            def staged() -> None:
                self._place(f, server)
                self.read(f, server.id, center, on_ready, purpose)

            self.sim.after(st.mount_latency, staged)
            return
        st.touch(f.id)

        def served() -> None:
            if st.center == center:
                on_ready(None)
            else:
                self.network.start_transfer(f.id, f.size, st.center, center, on_ready, f.cls, purpose)

        if isinstance(st, DatabaseServer):
            st.request(served)
        else:
            served()

    def fetch(self, f: FileRecord, center: str, on_ready: Callable[..., None],
              purpose: str = "read") -> str:
        """Read ``f`` into ``center`` from the cheapest replica; returns its id."""
        src = self.find_optimal(f, center)
        self.read(f, src, center, on_ready, purpose)
        return src

    # -- checks ---------------------------------------------------------------

    def audit(self) -> list[str]:
        problems = []
        for f in self.files.values():
            for sid in f.replicas:
                st = self.storages.get(sid)
                if st is None or not st.holds(f.id):
                    problems.append(f"catalog lists {f.id} on {sid} but it is not resident")
        for st in self.storages.values():
            for fid in st.resident:
                f = self.files.get(fid)
                if f is None or st.id not in f.replicas:
                    problems.append(f"{st.id} holds {fid} but the catalog does not list it")
            if st.used > st.capacity * (1 + 1e-12):
                problems.append(f"{st.id} over capacity: {st.used} > {st.capacity}")
            if abs(st.used - sum(st.resident.values())) > 1e-6 * max(1.0, st.used):
                problems.append(f"{st.id} occupancy counter drifted")
        return problems
