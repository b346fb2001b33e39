"""Whole-run drivers: every rank in one virtual-time process, or one socket rank per process."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clock import Clock, ClockMode, EventLoop
from .collectives import CollectiveEngine, StubCommEngine
from .netmodel import AnomalyEvent, FluidNetwork, Topology, shape_real_endpoint
from .scheduler import DeadlockError, OpRecord, RankScheduler, RealTimers, init_rank, run_rank
from .transport.sim import SimFabric
from .transport.sockets import connect_socket_mesh
from .workload import CollType, CommGroup, OperatorNode, OpKind, WorkloadGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StubConfig:
    """Fixed communication durations (µs) by coll_id, with a fallback."""

    durations: Mapping[int, float] = field(default_factory=dict)
    default_us: float = 0.0


@dataclass
class VirtualRun:
    graph: WorkloadGraph
    records: list[OpRecord]
    engines: dict[int, object]

    @property
    def makespan_us(self) -> float:
        return max((r.end_us for r in self.records), default=0.0)


def sort_records(records: Sequence[OpRecord]) -> list[OpRecord]:
    return sorted(records, key=lambda r: (r.rank, r.start_us, r.node_id))


def run_virtual(graph: WorkloadGraph, topology: Topology | None = None, anomalies: Sequence[AnomalyEvent] = (), *,
                algorithms: Mapping | None = None, stub: StubConfig | None = None, verify: bool = False,
                seed: int = 0, max_concurrency: int | None = None) -> VirtualRun:
    """Run all ranks on one deterministic event loop.

    Communication goes over the fluid network model unless ``stub`` gives
    fixed durations instead.
    """
    loop = EventLoop(Clock(ClockMode.VIRTUAL))
    engines: dict[int, object] = {}
    if stub is not None:
        shared = StubCommEngine(graph, loop, stub.durations, stub.default_us)
        engines = {r: shared.for_rank(r) for r in range(graph.num_ranks)}
    else:
        topology = topology or Topology.uniform(graph.num_ranks)
        if len(topology.hosts) < graph.num_ranks:
            raise ValueError(f"topology has {len(topology.hosts)} hosts for {graph.num_ranks} ranks")
        fabric = SimFabric(FluidNetwork(topology, anomalies, loop), graph.num_ranks)
        for r in range(graph.num_ranks):
            ep = fabric.endpoint(r)
            eng = CollectiveEngine(graph, r, ep, lambda: loop.now, loop.call_soon, dict(algorithms or {}),
                                   verify=verify, seed=seed)
            ep.notify = eng.pump
            engines[r] = eng
    scheds = [RankScheduler(init_rank(graph, r), engines[r], loop, max_concurrency) for r in range(graph.num_ranks)]
    for s in scheds:
        s.start()
    loop.run()
    stuck = [s.state.rank for s in scheds if not s.done]
    if stuck:
        detail = "; ".join(f"rank {s.state.rank} blocked on nodes {s.blocking_nodes() or sorted(s.state.ready)}"
                           for s in scheds if not s.done)
        raise DeadlockError(f"no events left with unfinished ranks {stuck}: {detail}")
    records = sort_records([rec for s in scheds for rec in s.state.records])
    return VirtualRun(graph, records, engines)


def single_collective_graph(coll_type: CollType | str, num_ranks: int, size_bytes: int, coll_id: int = 0) -> WorkloadGraph:
    coll_type = CollType(coll_type)
    group = CommGroup(0, tuple(range(num_ranks)))
    nodes = {r: (OperatorNode(0, r, OpKind.COMM_COLL, coll_type=coll_type, size_bytes=size_bytes, group_id=0,
                              coll_id=coll_id),) for r in range(num_ranks)}
    return WorkloadGraph(num_ranks, (group,), nodes)


def verify_collective(coll_type: CollType | str, num_ranks: int, size_bytes: int, seed: int = 0,
                      topology: Topology | None = None) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Run one collective with real 64-bit payloads; returns per-rank ``(inputs, outputs)``."""
    graph = single_collective_graph(coll_type, num_ranks, size_bytes)
    run = run_virtual(graph, topology, verify=True, seed=seed)
    inputs = {r: e.inputs[0] for r, e in run.engines.items()}
    outputs = {r: e.outputs[0] for r, e in run.engines.items()}
    return inputs, outputs


# ---------------------------------------------------------------------------
# socket ranks


def _start_clock(go_unix_ns: int) -> Clock:
    """Wall clock whose zero is the shared start instant."""
    offset = go_unix_ns - time.time_ns()
    return Clock(ClockMode.REAL, time.monotonic_ns() + offset)


def run_socket_rank(graph: WorkloadGraph, rank: int, bind: str, *, rendezvous: str | None = None,
                    host_map: Mapping[int, str] | None = None, topology: Topology | None = None,
                    anomalies: Sequence[AnomalyEvent] = (), algorithms: Mapping | None = None, seed: int = 0,
                    timeout: float = 60.0, quiescence_s: float = 60.0) -> list[OpRecord]:
    """Run one rank over stream sockets.

    With ``rendezvous`` the coordinator supplies the peer map, a common start
    instant and receives the records; otherwise ``host_map`` must list every
    rank and each rank starts its clock when its mesh is up.
    """
    addrs = dict(host_map or {})
    addrs[rank] = bind
    ep, client = connect_socket_mesh(rank, addrs, rendezvous, timeout=timeout)
    try:
        go = client.barrier() if client is not None else time.time_ns()
        clock = _start_clock(go)
        ep.clock = clock
        if topology is not None:
            host = topology.host_for_rank(rank)
            if any(ev.target == f"host:{host.id}" for ev in anomalies):
                shape_real_endpoint(ep, anomalies, host.nic_gbps, host_id=host.id)
        clock.sleep_until(0.0)
        timers = RealTimers(clock)
        engine = CollectiveEngine(graph, rank, ep, lambda: clock.now_us, timers.call_soon, dict(algorithms or {}),
                                  seed=seed)
        records = run_rank(init_rank(graph, rank), engine, ep, clock, timers=timers, quiescence_s=quiescence_s)
        log.info("rank %d finished %d nodes at %.1f us", rank, len(records), clock.now_us)
    finally:
        ep.close()
    if client is not None:
        client.report({"rank": rank, "records": [r.to_dict() for r in records]})
    return records
