"""Discrete-event kernel: clock, event queue, processes and shared resources.

Shared resources use the interrupt scheme: whenever the set of claims or the
capacity changes, the progress of every claim is brought up to date, rates are
re-solved and a single completion event is issued for the earliest finisher.
Superseded completion events are not removed from the heap; they carry the
resource epoch at the time they were issued and are discarded on delivery
when it no longer matches.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

# absolute slack on remaining work, scaled up for large claims
EPS = 1e-9
DEFAULT_SAME_TIME_LIMIT = 10**6


class SimulationAbort(RuntimeError):
    """Fatal modelling or logic error; the run cannot continue."""


class EventKind(enum.IntEnum):
    WAKE = 0
    INTERRUPT = 1
    COMPLETION = 2
    MESSAGE = 3
    CAPACITY = 4


class ProcessState(enum.Enum):
    IDLE = "idle"
    RUNNING = "running"
    WAITING = "waiting"
    FINISHED = "finished"


@dataclass(eq=False)
class SimEvent:
    time: float
    target: int
    kind: EventKind
    payload: Any = None
    epoch: int = 0
    seq: int = -1

    def sort_key(self) -> tuple[float, int]:
        return (self.time, self.seq)


class Process:
    """Something that receives events.  Subclasses implement :meth:`handle`."""

    def __init__(self, name: str = ""):
        self.name = name
        self.pid: int = -1
        self.sim: Simulator | None = None
        self.state = ProcessState.IDLE

    def handle(self, event: SimEvent) -> None:
        raise NotImplementedError

    def finish(self) -> None:
        self.state = ProcessState.FINISHED

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name or self.pid}>"


class _Dispatcher(Process):
    # target of plain timer callbacks scheduled with Simulator.at()
    def handle(self, event: SimEvent) -> None:
        fn, args = event.payload
        fn(*args)


@dataclass
class SimulationReport:
    clock: float
    events_processed: int
    stale_dropped: int
    clamped: int
    events_pending: int

    def as_dict(self) -> dict[str, float | int]:
        return dict(self.__dict__)


class Simulator:
    def __init__(self, same_time_limit: int = DEFAULT_SAME_TIME_LIMIT, record_trace: bool = False):
        self.now = 0.0
        self._heap: list[tuple[float, int, SimEvent]] = []
        self._seq = 0
        self.processes: list[Process] = []
        self.same_time_limit = same_time_limit
        self.events_processed = 0
        self.stale_dropped = 0
        self.clamped = 0
        self.trace: list[tuple[float, int, int]] | None = [] if record_trace else None
        self._dispatcher = self.register(_Dispatcher("dispatcher"))

    # -- registry -----------------------------------------------------------

    def register(self, proc: Process) -> Process:
        proc.pid = len(self.processes)
        proc.sim = self
        self.processes.append(proc)
        return proc

    # -- queue --------------------------------------------------------------

    def enqueue(self, event: SimEvent) -> SimEvent:
        if not event.time >= self.now:
            raise SimulationAbort(
                f"event {event.kind.name} for pid {event.target} at t={event.time!r} "
                f"is in the past (clock {self.now!r})"
            )
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event

    def schedule(self, time: float, target: Process | int, kind: EventKind = EventKind.WAKE,
                 payload: Any = None, epoch: int = 0) -> SimEvent:
        pid = target if isinstance(target, int) else target.pid
        return self.enqueue(SimEvent(time, pid, kind, payload, epoch))

    def at(self, time: float, fn: Callable[..., Any], *args: Any) -> SimEvent:
        """Call ``fn(*args)`` from inside the event loop at ``time``."""
        return self.schedule(time, self._dispatcher, EventKind.WAKE, (fn, args))

    def after(self, delay: float, fn: Callable[..., Any], *args: Any) -> SimEvent:
        return self.at(self.now + delay, fn, *args)

    def pop(self) -> SimEvent | None:
        """Remove and return the next event, or None when the queue is empty."""
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[2]

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    @property
    def pending(self) -> int:
        return len(self._heap)

    # -- main loop ----------------------------------------------------------

    def run_until(self, t_end: float) -> SimulationReport:
        if not t_end > 0:
            raise ValueError("t_end must be positive")
        same_time = 0
        last_time = None
        while self._heap and self._heap[0][0] <= t_end:
            ev = heapq.heappop(self._heap)[2]
            if ev.time == last_time:
                same_time += 1
                if same_time > self.same_time_limit:
                    raise SimulationAbort(
                        f"more than {self.same_time_limit} events at t={ev.time!r}; "
                        "probable modelling cycle"
                    )
            else:
                same_time = 0
                last_time = ev.time
            self.now = ev.time
            self._deliver(ev)
        self.now = max(self.now, float(t_end))
        return self.report()

    def _deliver(self, ev: SimEvent) -> None:
        proc = self.processes[ev.target]
        if proc.state is ProcessState.FINISHED:
            self.stale_dropped += 1
            return
        self.events_processed += 1
        if self.trace is not None:
            self.trace.append((ev.time, ev.seq, int(ev.kind)))
        proc.handle(ev)

    def report(self) -> SimulationReport:
        return SimulationReport(
            clock=self.now,
            events_processed=self.events_processed,
            stale_dropped=self.stale_dropped,
            clamped=self.clamped,
            events_pending=len(self._heap),
        )


# ---------------------------------------------------------------------------
# processor-sharing resource
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Claim:
    owner: Hashable
    remaining: float
    weight: float = 1.0
    cap: float = math.inf
    on_done: Callable[["Claim"], None] | None = None
    rate: float = 0.0
    projected_finish: float = math.inf
    work: float = 0.0
    joined_at: float = 0.0
    done_work: float = 0.0

    def tolerance(self) -> float:
        return EPS * max(1.0, self.work)


class SharedResource(Process):
    """Capacity divided among claims by weight, with per-claim ceilings.

    ``schedule`` is an optional list of ``(time, capacity)`` breakpoints that
    take effect as capacity-change interrupts.
    """

    def __init__(self, sim: Simulator, name: str, capacity: float,
                 schedule: Iterable[tuple[float, float]] = ()):
        super().__init__(name)
        if capacity < 0:
            raise ValueError(f"{name}: negative capacity")
        self.capacity = float(capacity)
        self.claims: dict[Hashable, Claim] = {}
        self.last_update = sim.now
        self.epoch = 0
        self.completions = 0
        self.busy_integral = 0.0      # work delivered, all time
        self.capacity_integral = 0.0  # capacity-seconds, all time
        sim.register(self)
        self.state = ProcessState.RUNNING
        for t, cap in schedule:
            sim.schedule(float(t), self, EventKind.CAPACITY, float(cap))

    # -- bookkeeping --------------------------------------------------------

    def update(self, now: float) -> None:
        elapsed = now - self.last_update
        if elapsed < 0:
            raise SimulationAbort(f"{self.name}: update into the past")
        if elapsed == 0:
            return
        used = 0.0
        for c in self.claims.values():
            step = c.rate * elapsed
            c.remaining -= step
            c.done_work += step
            used += step
            if c.remaining < 0:
                if c.remaining < -c.tolerance():
                    log.debug("%s: claim %s overshot by %g", self.name, c.owner, -c.remaining)
                c.done_work += c.remaining
                used += c.remaining
                c.remaining = 0.0
                self.sim.clamped += 1
        self.busy_integral += used
        self.capacity_integral += self.capacity * elapsed
        self.last_update = now

    def _reallocate(self) -> None:
        now = self.sim.now
        self.epoch += 1
        claims = list(self.claims.values())
        if not claims:
            return
        if self.capacity <= 0:
            for c in claims:
                c.rate = 0.0
                c.projected_finish = math.inf
            return
        n = len(claims)
        if all(c.cap == math.inf for c in claims):
            total = sum(c.weight for c in claims)
            rates = [self.capacity * c.weight / total for c in claims]
        else:
            rates = kernels.progressive_fill(
                np.arange(n + 1),
                np.zeros(n, dtype=np.int64),
                np.array([self.capacity]),
                np.array([c.cap for c in claims]),
                np.array([c.weight for c in claims]),
            )
        first = None
        for c, r in zip(claims, rates):
            c.rate = float(r)
            c.projected_finish = now + c.remaining / c.rate if c.rate > 0 else math.inf
            if c.rate > 0 and (first is None or c.projected_finish < first.projected_finish):
                first = c
        # one event per epoch: the earliest finisher; ties are swept up in handle()
        if first is not None:
            self.sim.schedule(first.projected_finish, self, EventKind.COMPLETION, first.owner, self.epoch)

    # -- public operations --------------------------------------------------

    def join(self, claim: Claim) -> Claim:
        if not claim.remaining > 0:
            raise ValueError(f"{self.name}: claim needs positive work")
        if not claim.weight > 0:
            raise ValueError(f"{self.name}: claim needs positive weight")
        if claim.owner in self.claims:
            raise SimulationAbort(f"{self.name}: owner {claim.owner!r} already holds a claim")
        now = self.sim.now
        self.update(now)
        claim.work = claim.remaining
        claim.joined_at = now
        self.claims[claim.owner] = claim
        self._reallocate()
        return claim

    def leave(self, owner: Hashable) -> Claim:
        if owner not in self.claims:
            raise SimulationAbort(f"{self.name}: unknown claim owner {owner!r}")
        self.update(self.sim.now)
        claim = self.claims.pop(owner)
        self._reallocate()
        return claim

    def set_capacity(self, capacity: float) -> None:
        if capacity < 0:
            raise SimulationAbort(f"{self.name}: negative capacity")
        self.update(self.sim.now)
        self.capacity = float(capacity)
        self._reallocate()

    @property
    def load(self) -> float:
        return sum(c.rate for c in self.claims.values())

    def handle(self, event: SimEvent) -> None:
        if event.kind is EventKind.CAPACITY:
            self.set_capacity(event.payload)
            return
        if event.kind is not EventKind.COMPLETION:
            raise SimulationAbort(f"{self.name}: unexpected event {event.kind.name}")
        if event.epoch != self.epoch:
            self.sim.stale_dropped += 1
            return
        self.update(event.time)
        claim = self.claims.get(event.payload)
        if claim is None or claim.remaining > claim.tolerance():
            raise SimulationAbort(
                f"{self.name}: valid completion at t={event.time} but claim "
                f"{event.payload!r} is not finished"
            )
        # finish every claim that ran out at this instant in one interrupt
        finished = [c for c in self.claims.values() if c.remaining <= c.tolerance()]
        self.completions += len(finished)
        for c in finished:
            if c.remaining != 0.0:
                self.sim.clamped += 1
            c.done_work += c.remaining
            c.remaining = 0.0
            del self.claims[c.owner]
        self._reallocate()
        for c in finished:
            if c.on_done is not None:
                c.on_done(c)
