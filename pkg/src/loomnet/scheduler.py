"""Per-rank dependency-driven execution of a workload graph."""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

from .clock import Clock, ClockMode, EventLoop, TimerHandle
from .transport.base import Endpoint
from .workload import OperatorNode, OpKind, WorkloadGraph


class DeadlockError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpRecord:
    rank: int
    node_id: int
    kind: str
    start_us: float
    end_us: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RankState:
    rank: int
    nodes: dict[int, OperatorNode]
    dependents: dict[int, list[int]]
    pending_deps: dict[int, int]
    ready: set[int] = field(default_factory=set)
    in_flight: set[int] = field(default_factory=set)
    completed: set[int] = field(default_factory=set)
    records: list[OpRecord] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return len(self.completed) == len(self.nodes)


def init_rank(graph: WorkloadGraph, rank: int) -> RankState:
    if not 0 <= rank < graph.num_ranks:
        raise ValueError(f"rank {rank} out of range for {graph.num_ranks} ranks")
    nodes = {n.id: n for n in graph.rank_nodes(rank)}
    dependents: dict[int, list[int]] = {i: [] for i in nodes}
    for n in nodes.values():
        for d in n.deps:
            dependents[d].append(n.id)
    pending = {n.id: len(n.deps) for n in nodes.values()}
    ready = {i for i, c in pending.items() if c == 0}
    return RankState(rank, nodes, dependents, pending, ready)


def on_complete(state: RankState, node_id: int) -> set[int]:
    """Mark ``node_id`` complete; returns the dependents that just became ready."""
    if node_id not in state.in_flight:
        raise ValueError(f"node {node_id} of rank {state.rank} is not in flight")
    state.in_flight.remove(node_id)
    state.completed.add(node_id)
    newly = set()
    for d in state.dependents[node_id]:
        state.pending_deps[d] -= 1
        if state.pending_deps[d] == 0:
            newly.add(d)
    state.ready |= newly
    return newly


class CommEngine(Protocol):
    def start(self, node: OperatorNode, on_done: Callable[[float], None]) -> None: ...

    def pump(self) -> None: ...


class Timers(Protocol):
    @property
    def now(self) -> float: ...

    def call_at(self, when: float, callback: Callable[[], None]) -> object: ...


class RankScheduler:
    """Issues ready nodes in ascending id order as dependencies resolve.

    Compute and memory nodes are timers of ``duration_us``; communication
    nodes are handed to the engine and finish when it calls back.
    """

    def __init__(self, state: RankState, engine: CommEngine, timers: Timers, max_concurrency: int | None = None):
        if max_concurrency is not None and max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self.state = state
        self.engine = engine
        self.timers = timers
        self.max_concurrency = max_concurrency
        self._heap = sorted(state.ready)
        self._starts: dict[int, float] = {}
        self._issuing = False

    def start(self) -> None:
        self._issue()

    def _issue(self) -> None:
        if self._issuing:
            return
        self._issuing = True
        try:
            st = self.state
            while self._heap and (self.max_concurrency is None or len(st.in_flight) < self.max_concurrency):
                nid = heapq.heappop(self._heap)
                st.ready.remove(nid)
                st.in_flight.add(nid)
                node = st.nodes[nid]
                now = self.timers.now
                self._starts[nid] = now
                if node.kind.is_comm:
                    self.engine.start(node, lambda t, nid=nid: self._finish(nid, t))
                else:
                    end = now + node.duration_us
                    self.timers.call_at(end, lambda nid=nid, end=end: self._finish(nid, end))
        finally:
            self._issuing = False

    def _finish(self, nid: int, end_us: float) -> None:
        st = self.state
        start = self._starts.pop(nid)
        node = st.nodes[nid]
        st.records.append(OpRecord(st.rank, nid, node.kind.value, start, max(end_us, start)))
        for d in sorted(on_complete(st, nid)):
            heapq.heappush(self._heap, d)
        self._issue()

    @property
    def done(self) -> bool:
        return self.state.done

    def stalled(self) -> bool:
        st = self.state
        return not st.ready and not st.in_flight and not st.done

    def check_deadlock(self) -> None:
        st = self.state
        if self.stalled():
            missing = sorted(set(st.nodes) - st.completed)
            raise DeadlockError(f"rank {st.rank} stalled with {len(missing)} unfinished nodes (first: {missing[:5]})")

    def blocking_nodes(self) -> list[int]:
        return sorted(self.state.in_flight)


class RealTimers:
    """Timer heap over a wall clock, drained by :func:`run_rank`'s loop."""

    def __init__(self, clock: Clock):
        self.clock = clock
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return self.clock.now_us

    def call_at(self, when: float, callback: Callable[[], None]) -> TimerHandle:
        h = TimerHandle(when, callback)
        heapq.heappush(self._heap, (when, next(self._seq), h))
        return h

    def call_soon(self, callback: Callable[[], None]) -> TimerHandle:
        return self.call_at(float("-inf"), callback)

    def next_deadline(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def run_due(self) -> bool:
        fired = False
        while self._heap and self._heap[0][0] <= self.clock.now_us:
            _, _, h = heapq.heappop(self._heap)
            if not h.cancelled:
                h.callback()
                fired = True
        return fired


DEFAULT_QUIESCENCE_S = 60.0
# Longest single blocking wait on the transport, so timers stay responsive.
_MAX_WAIT_S = 0.05


def run_rank(state: RankState, collective_engine: CommEngine, transport: Endpoint | None, clock: Clock, *,
             timers: EventLoop | RealTimers | None = None, max_concurrency: int | None = None,
             quiescence_s: float = DEFAULT_QUIESCENCE_S) -> list[OpRecord]:
    """Execute one rank to completion and return its records.

    VIRTUAL clocks run on an :class:`EventLoop` (drained here, so this is for a
    rank whose communication does not depend on other ranks' loops). REAL
    clocks poll the engine and sleep on the transport between timer deadlines.
    """
    if clock.mode is ClockMode.VIRTUAL:
        loop = timers if timers is not None else EventLoop(clock)
        sched = RankScheduler(state, collective_engine, loop, max_concurrency)
        sched.start()
        loop.run()
        sched.check_deadlock()
        return state.records

    rt = timers if timers is not None else RealTimers(clock)
    sched = RankScheduler(state, collective_engine, rt, max_concurrency)
    sched.start()
    last_progress = time.monotonic()
    while not sched.done:
        progressed = rt.run_due()
        before = len(state.completed)
        collective_engine.pump()
        progressed = rt.run_due() or progressed or len(state.completed) != before
        if sched.done:
            break
        if progressed:
            last_progress = time.monotonic()
            continue
        sched.check_deadlock()
        if time.monotonic() - last_progress > quiescence_s:
            raise DeadlockError(
                f"rank {state.rank}: no progress for {quiescence_s:g} s; blocked on nodes {sched.blocking_nodes()}")
        deadline = rt.next_deadline()
        if deadline is not None and deadline - clock.now_us < 1000.0:
            clock.sleep_until(deadline)
            continue
        wait_s = _MAX_WAIT_S
        if deadline is not None:
            wait_s = min(wait_s, max(0.0, (deadline - clock.now_us - 500.0) / 1e6))
        if transport is not None:
            transport.wait(wait_s)
        else:
            time.sleep(wait_s)
    return state.records
