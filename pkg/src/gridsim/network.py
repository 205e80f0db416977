"""Flow-level network: links, static routes and max-min fair transfers.

Links are full duplex; each direction is an independent channel named
``"<link>:<from>><to>"``.  Rates of all active transfers are re-solved
together whenever a transfer starts, ends, or a link changes capacity.
Transfers over a path with non-zero round-trip time are additionally capped
at ``window * 8 / rtt`` bits per second.

All sizes are decimal bytes, rates bits per second, times seconds.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .engine import EventKind, Process, ProcessState, SimEvent, SimulationAbort, Simulator

log = logging.getLogger(__name__)

DEFAULT_WINDOW_BYTES = 8e6
# relative slack on a transfer's remaining bits when deciding it is complete
BIT_TOL = 1e-9


class NoRouteError(SimulationAbort):
    pass


@dataclass
class Link:
    id: str
    a: str
    b: str
    capacity: float  # bits/s at t=0
    rtt: float = 0.0  # seconds contributed to any path crossing the link
    schedule: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        pts = [(0.0, float(self.capacity))] + [(float(t), float(c)) for t, c in self.schedule]
        pts.sort(key=lambda p: p[0])
        times = [t for t, _ in pts]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError(f"link {self.id}: schedule breakpoints must be strictly increasing")
        if any(c <= 0 for _, c in pts):
            raise ValueError(f"link {self.id}: capacity must be positive on every segment")
        self._times = times
        self._caps = [c for _, c in pts]

    def capacity_at(self, t: float) -> float:
        return self._caps[bisect.bisect_right(self._times, t) - 1]

    def breakpoints(self) -> list[tuple[float, float]]:
        return list(zip(self._times[1:], self._caps[1:]))


def channel_name(link_id: str, src: str, dst: str) -> str:
    return f"{link_id}:{src}>{dst}"


class Topology:
    """Nodes, full-duplex links and one static path per node pair.

    Paths come from ``routes`` (node sequences keyed by ``(src, dst)``) when
    given, otherwise from a breadth-first search that visits neighbours in
    sorted order, so the chosen path is reproducible.
    """

    def __init__(self, nodes: Iterable[str], links: Iterable[Link],
                 routes: dict[tuple[str, str], Sequence[str]] | None = None):
        self.nodes = list(nodes)
        self.links = {l.id: l for l in links}
        self.channels: list[str] = []
        self.channel_link: list[str] = []
        self._channel_index: dict[tuple[str, str], int] = {}  # (from, to) -> channel
        self._adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for link in self.links.values():
            for u, v in ((link.a, link.b), (link.b, link.a)):
                if u not in self._adj:
                    raise ValueError(f"link {link.id}: unknown node {u!r}")
                if (u, v) in self._channel_index:
                    raise ValueError(f"link {link.id}: duplicate link between {u} and {v}")
                self._channel_index[(u, v)] = len(self.channels)
                self.channels.append(channel_name(link.id, u, v))
                self.channel_link.append(link.id)
                self._adj[u].append(v)
        for n in self._adj:
            self._adj[n].sort()
        self._routes: dict[tuple[str, str], list[str]] = {}
        for (s, d), hops in (routes or {}).items():
            self._check_route(s, d, list(hops))
            self._routes[(s, d)] = list(hops)
            self._routes.setdefault((d, s), list(reversed(hops)))
        self._path_cache: dict[tuple[str, str], np.ndarray] = {}
        self._rtt_cache: dict[tuple[str, str], float] = {}

    def _check_route(self, s: str, d: str, hops: list[str]) -> None:
        if not hops or hops[0] != s or hops[-1] != d:
            raise ValueError(f"route {s}>{d} must start at {s} and end at {d}")
        for u, v in zip(hops, hops[1:]):
            if (u, v) not in self._channel_index:
                raise ValueError(f"route {s}>{d}: no link between {u} and {v}")

    def node_path(self, src: str, dst: str) -> list[str]:
        if (src, dst) in self._routes:
            return self._routes[(src, dst)]
        if src not in self._adj or dst not in self._adj:
            raise NoRouteError(f"no route {src} -> {dst}: unknown node")
        if src == dst:
            return [src]
        prev = {src: None}
        q = deque([src])
        while q:
            u = q.popleft()
            if u == dst:
                break
            for v in self._adj[u]:
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        if dst not in prev:
            raise NoRouteError(f"no route {src} -> {dst}")
        hops = [dst]
        while hops[-1] != src:
            hops.append(prev[hops[-1]])
        hops.reverse()
        self._routes[(src, dst)] = hops
        return hops

    def path(self, src: str, dst: str) -> np.ndarray:
        key = (src, dst)
        p = self._path_cache.get(key)
        if p is None:
            hops = self.node_path(src, dst)
            p = np.array([self._channel_index[(u, v)] for u, v in zip(hops, hops[1:])], dtype=np.int64)
            self._path_cache[key] = p
        return p

    def path_links(self, src: str, dst: str) -> list[str]:
        return [self.channel_link[c] for c in self.path(src, dst)]

    def rtt(self, src: str, dst: str) -> float:
        key = (src, dst)
        r = self._rtt_cache.get(key)
        if r is None:
            r = sum(self.links[self.channel_link[c]].rtt for c in self.path(src, dst))
            self._rtt_cache[key] = r
        return r

    def channel(self, src: str, dst: str) -> int:
        return self._channel_index[(src, dst)]

    def capacities_at(self, t: float) -> np.ndarray:
        return np.array([self.links[l].capacity_at(t) for l in self.channel_link])

    def connected(self) -> bool:
        if not self.nodes:
            return True
        seen = {self.nodes[0]}
        q = deque(seen)
        while q:
            for v in self._adj[q.popleft()]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        return len(seen) == len(self.nodes)


def window_cap(window_bytes: float, rtt: float) -> float:
    """Throughput ceiling of a windowed transfer, bits/s (inf when rtt is 0)."""
    if rtt <= 0:
        return math.inf
    return window_bytes * 8.0 / rtt


def allocate_rates(paths: Sequence[np.ndarray], caps: Sequence[float], link_capacity: np.ndarray) -> np.ndarray:
    """Max-min fair rates for flows over ``link_capacity`` channels.

    ``paths[i]`` lists the channel indices of flow ``i``; ``caps[i]`` is its
    own ceiling.  Flows with an empty path and no cap get ``inf``.
    """
    n = len(paths)
    if n == 0:
        return np.zeros(0)
    lens = np.fromiter((len(p) for p in paths), dtype=np.int64, count=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lens, out=ptr[1:])
    idx = np.concatenate(paths) if ptr[-1] else np.zeros(0, dtype=np.int64)
    return kernels.progressive_fill(ptr, idx, link_capacity, np.asarray(caps, dtype=float), np.ones(n))


@dataclass(eq=False)
class Transfer:
    """One file moving between two nodes.

    While the transfer is active its progress lives in the network's arrays
    (see :meth:`FlowNetwork.rate` and :meth:`FlowNetwork.progress`); the
    ``bits_*`` and ``rate`` fields are filled in when it finishes.
    """

    id: int
    file_id: str
    cls: str
    src: str
    dst: str
    size: float  # bytes
    path: np.ndarray
    rtt: float
    cap: float
    started_at: float
    purpose: str = ""
    on_done: Callable[["Transfer"], None] | None = None
    bits_remaining: float = 0.0
    bits_done: float = 0.0
    rate: float = 0.0
    finished_at: float | None = None


@dataclass
class TransferRecord:
    file_id: str
    cls: str
    src: str
    dst: str
    size: float
    t_start: float
    t_end: float
    purpose: str = ""


class FlowNetwork(Process):
    """Active transfers over a :class:`Topology`, re-solved on every interrupt.

    Per-transfer state is kept in arrays ordered by start, so advancing the
    clock and re-solving rates cost a few vector operations however many
    transfers are in flight.  Only the earliest projected completion is kept
    in the event queue, stamped with the allocation epoch; any interrupt
    makes it stale.
    """

    def __init__(self, sim: Simulator, topology: Topology, window_bytes: float = DEFAULT_WINDOW_BYTES):
        super().__init__("network")
        self.topology = topology
        self.window_bytes = float(window_bytes)
        self.active: dict[int, Transfer] = {}
        self.capacity = topology.capacities_at(0.0)
        nch = len(topology.channels)
        self.bits = np.zeros(nch)           # delivered bits per channel, all time
        self.capacity_integral = np.zeros(nch)
        self.last_update = sim.now
        self.epoch = 0
        self._next_id = 0
        self.records: list[TransferRecord] = []
        self.conservation_violations = 0
        self.completions = 0
        # parallel arrays over active transfers, in start order
        self._order: list[Transfer] = []
        self._total = np.zeros(0)
        self._rem = np.zeros(0)
        self._done = np.zeros(0)
        self._rate = np.zeros(0)
        self._cap = np.zeros(0)
        self._ptr = np.zeros(1, dtype=np.int64)
        self._idx = np.zeros(0, dtype=np.int64)
        self._owner = np.zeros(0, dtype=np.int64)  # transfer position of each _idx entry
        sim.register(self)
        self.state = ProcessState.RUNNING
        for link in topology.links.values():
            for t, cap in link.breakpoints():
                sim.schedule(t, self, EventKind.CAPACITY, (link.id, cap))

    # -- array bookkeeping ------------------------------------------------------

    def _append(self, tr: Transfer) -> None:
        self._order.append(tr)
        self._total = np.append(self._total, tr.bits_remaining)
        self._rem = np.append(self._rem, tr.bits_remaining)
        self._done = np.append(self._done, 0.0)
        self._rate = np.append(self._rate, 0.0)
        self._cap = np.append(self._cap, tr.cap)
        self._ptr = np.append(self._ptr, self._ptr[-1] + tr.path.size)
        self._idx = np.concatenate([self._idx, tr.path])
        self._owner = np.concatenate([self._owner, np.full(tr.path.size, len(self._order) - 1, dtype=np.int64)])

    def _drop(self, keep: np.ndarray) -> None:
        self._order = [t for t, k in zip(self._order, keep) if k]
        self._total, self._rem, self._done, self._rate, self._cap = (
            self._total[keep], self._rem[keep], self._done[keep], self._rate[keep], self._cap[keep])
        lens = np.diff(self._ptr)[keep]
        self._idx = self._idx[keep[self._owner]]
        self._ptr = np.zeros(lens.size + 1, dtype=np.int64)
        np.cumsum(lens, out=self._ptr[1:])
        self._owner = np.repeat(np.arange(lens.size, dtype=np.int64), lens)

    def _position(self, tr: Transfer) -> int:
        if tr.id not in self.active:
            raise KeyError(f"transfer {tr.id} is not active")
        return self._order.index(tr)

    def rate(self, tr: Transfer) -> float:
        """Current rate of a transfer, bits/s (its final rate once finished)."""
        if tr.id not in self.active:
            return tr.rate
        return float(self._rate[self._position(tr)])

    def progress(self, tr: Transfer) -> tuple[float, float]:
        """(bits delivered, bits remaining) as of the last update."""
        if tr.id not in self.active:
            return tr.bits_done, tr.bits_remaining
        i = self._position(tr)
        return float(self._done[i]), float(self._rem[i])

    # -- state advance ------------------------------------------------------

    def advance(self, now: float) -> None:
        elapsed = now - self.last_update
        if elapsed < 0:
            raise SimulationAbort("network update into the past")
        if elapsed == 0:
            return
        self.capacity_integral += self.capacity * elapsed
        if self._order:
            want = self._rate * elapsed
            step = np.minimum(want, self._rem)
            self.sim.clamped += int(np.count_nonzero(want > self._rem))
            self._rem -= step
            self._done += step
            if self._idx.size:
                self.bits += np.bincount(self._idx, weights=step[self._owner], minlength=self.bits.size)
        self.last_update = now

    def _reallocate(self) -> None:
        self.epoch += 1
        if not self._order:
            return
        self._rate = kernels.progressive_fill(self._ptr, self._idx, self.capacity, self._cap,
                                              np.ones(len(self._order)))
        with np.errstate(divide="ignore", invalid="ignore"):
            finish = np.where(self._rate > 0, self._rem / self._rate, np.inf)
        soonest = float(finish.min())
        if soonest < math.inf:
            self.sim.schedule(self.sim.now + soonest, self, EventKind.COMPLETION, None, self.epoch)

    # -- public operations --------------------------------------------------

    def start_transfer(self, file_id: str, size: float, src: str, dst: str,
                       on_done: Callable[[Transfer], None] | None = None,
                       cls: str = "RAW", purpose: str = "") -> Transfer:
        if not size > 0:
            raise SimulationAbort(f"transfer of {file_id}: size must be positive")
        path = self.topology.path(src, dst)
        rtt = self.topology.rtt(src, dst)
        tr = Transfer(
            id=self._next_id, file_id=file_id, cls=cls, src=src, dst=dst, size=float(size),
            path=path, rtt=rtt, cap=window_cap(self.window_bytes, rtt), started_at=self.sim.now,
            purpose=purpose, on_done=on_done, bits_remaining=float(size) * 8.0,
        )
        self._next_id += 1
        if path.size == 0:
            # same node: nothing crosses the network
            tr.bits_done = tr.bits_remaining
            tr.bits_remaining = 0.0
            tr.finished_at = self.sim.now
            if on_done is not None:
                self.sim.at(self.sim.now, on_done, tr)
            return tr
        self.advance(self.sim.now)
        self.active[tr.id] = tr
        self._append(tr)
        self._reallocate()
        return tr

    def estimate_rate(self, src: str, dst: str) -> float:
        """Rate a new transfer src->dst would get right now (inf for a local copy)."""
        path = self.topology.path(src, dst)
        if path.size == 0:
            return math.inf
        cap = window_cap(self.window_bytes, self.topology.rtt(src, dst))
        ptr = np.append(self._ptr, self._ptr[-1] + path.size)
        idx = np.concatenate([self._idx, path])
        rates = kernels.progressive_fill(ptr, idx, self.capacity, np.append(self._cap, cap),
                                         np.ones(len(self._order) + 1))
        return float(rates[-1])

    def set_capacity(self, link_id: str, capacity: float) -> None:
        if not capacity > 0:
            raise SimulationAbort(f"link {link_id}: capacity must be positive")
        self.advance(self.sim.now)
        for i, lid in enumerate(self.topology.channel_link):
            if lid == link_id:
                self.capacity[i] = capacity
        self._reallocate()

    def in_flight_bits(self) -> np.ndarray:
        """Bits already delivered per channel by transfers still in flight."""
        if not self._idx.size:
            return np.zeros(len(self.topology.channels))
        return np.bincount(self._idx, weights=self._done[self._owner], minlength=len(self.topology.channels))

    def handle(self, event: SimEvent) -> None:
        if event.kind is EventKind.CAPACITY:
            self.set_capacity(*event.payload)
            return
        if event.kind is not EventKind.COMPLETION:
            raise SimulationAbort(f"network: unexpected event {event.kind.name}")
        if event.epoch != self.epoch:
            self.sim.stale_dropped += 1
            return
        now = event.time
        self.advance(now)
        is_done = self._rem <= BIT_TOL * self._total
        if not is_done.any():
            raise SimulationAbort(f"network: valid completion at t={now} but no transfer finished")
        finished = []
        for i in np.flatnonzero(is_done):
            tr = self._order[i]
            rem, done = float(self._rem[i]), float(self._done[i])
            # account the sub-tolerance tail as delivered on the last step
            if rem:
                self.sim.clamped += 1
                done += rem
                self.bits[tr.path] += rem
            tr.bits_remaining, tr.bits_done, tr.rate = 0.0, done, float(self._rate[i])
            tr.finished_at = now
            if abs(done - tr.size * 8.0) > 1e-6 * tr.size * 8.0:
                self.conservation_violations += 1
            self.records.append(TransferRecord(tr.file_id, tr.cls, tr.src, tr.dst, tr.size,
                                               tr.started_at, now, tr.purpose))
            del self.active[tr.id]
            finished.append(tr)
        self._drop(~is_done)
        self.completions += len(finished)
        self._reallocate()
        for tr in finished:
            if tr.on_done is not None:
                tr.on_done(tr)
