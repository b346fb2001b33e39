"""Collective algorithms as per-rank point-to-point schedules, and their execution.

Planners are pure: they see only the group, the rank and byte counts, never
payload contents. Execution posts every send and receive of a step at once
and moves to the next step only after all of them have completed locally.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .transport.base import Completion, Endpoint, LengthMismatchError, TransportError
from .workload import CollType, CommGroup, OperatorNode, OpKind, WorkloadGraph, balanced_split

_COLL_BITS, _STEP_BITS, _CHUNK_BITS = 32, 16, 16
ELEM_DTYPE = np.dtype("<u8")


def encode_tag(coll_id: int, step: int, chunk: int) -> int:
    """Pack ``(coll_id: 32 bits, step: 16 bits, chunk: 16 bits)`` into one 64-bit tag."""
    if not 0 <= coll_id < 1 << _COLL_BITS:
        raise ValueError(f"coll_id {coll_id} does not fit in {_COLL_BITS} bits")
    if not 0 <= step < 1 << _STEP_BITS:
        raise ValueError(f"step {step} does not fit in {_STEP_BITS} bits")
    if not 0 <= chunk < 1 << _CHUNK_BITS:
        raise ValueError(f"chunk {chunk} does not fit in {_CHUNK_BITS} bits")
    return (coll_id << (_STEP_BITS + _CHUNK_BITS)) | (step << _CHUNK_BITS) | chunk


def decode_tag(tag: int) -> tuple[int, int, int]:
    return (
        tag >> (_STEP_BITS + _CHUNK_BITS),
        (tag >> _CHUNK_BITS) & ((1 << _STEP_BITS) - 1),
        tag & ((1 << _CHUNK_BITS) - 1),
    )


@dataclass(frozen=True)
class Msg:
    peer: int
    nbytes: int
    tag: int
    # Buffer slot the message reads from (send) or lands in (recv); None for opaque schedules.
    chunk: int | None = None
    reduce: bool = False


@dataclass(frozen=True)
class Step:
    sends: tuple[Msg, ...] = ()
    recvs: tuple[Msg, ...] = ()


@dataclass(frozen=True)
class CollectiveSchedule:
    coll_id: int
    rank: int
    steps: tuple[Step, ...] = ()
    coll_type: CollType | None = None
    group: CommGroup | None = None
    elem_size: int = 1

    @property
    def bytes_sent(self) -> int:
        return sum(m.nbytes for s in self.steps for m in s.sends)

    @property
    def bytes_received(self) -> int:
        return sum(m.nbytes for s in self.steps for m in s.recvs)

    def retag(self, coll_id: int) -> "CollectiveSchedule":
        """Move every tag into ``coll_id``'s tag space (for reusable custom templates)."""
        def fix(m: Msg) -> Msg:
            return replace(m, tag=(coll_id << 32) | (m.tag & 0xFFFFFFFF))

        steps = tuple(Step(tuple(map(fix, s.sends)), tuple(map(fix, s.recvs))) for s in self.steps)
        return replace(self, coll_id=coll_id, steps=steps)


def _chunk_sizes(total: int, parts: int, elem_size: int) -> list[int]:
    if total % elem_size:
        raise ValueError(f"size {total} is not a multiple of the element size {elem_size}")
    return [n * elem_size for n in balanced_split(total // elem_size, parts)]


def _position(group: CommGroup, rank: int) -> int:
    if rank not in group.members:
        raise ValueError(f"rank {rank} not in group {group.group_id}")
    return group.index(rank)


def plan_ring_allreduce(group: CommGroup, rank: int, size_bytes: int, *, coll_id: int = 0,
                        elem_size: int = 1) -> CollectiveSchedule:
    """Ring allreduce: N-1 reduce-scatter steps followed by N-1 allgather steps.

    At reduce-scatter step ``s`` position ``i`` sends chunk ``(i - s) mod N`` to
    its successor and reduces chunk ``(i - s - 1) mod N`` from its predecessor,
    which leaves it owning the reduced chunk ``(i + 1) mod N``.
    """
    i = _position(group, rank)
    n = group.size
    base = CollectiveSchedule(coll_id, rank, (), CollType.ALLREDUCE, group, elem_size)
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    if n == 1:
        return base
    sizes = _chunk_sizes(size_bytes, n, elem_size)
    succ, pred = group.members[(i + 1) % n], group.members[(i - 1) % n]
    steps = []
    for s in range(n - 1):
        out, inc = (i - s) % n, (i - s - 1) % n
        steps.append(Step(
            (Msg(succ, sizes[out], encode_tag(coll_id, s, out), out),),
            (Msg(pred, sizes[inc], encode_tag(coll_id, s, inc), inc, reduce=True),),
        ))
    for s in range(n - 1):
        out, inc = (i + 1 - s) % n, (i - s) % n
        k = n - 1 + s
        steps.append(Step(
            (Msg(succ, sizes[out], encode_tag(coll_id, k, out), out),),
            (Msg(pred, sizes[inc], encode_tag(coll_id, k, inc), inc),),
        ))
    return replace(base, steps=tuple(steps))


def plan_ring_reduce_scatter(group: CommGroup, rank: int, size_bytes: int, *, coll_id: int = 0,
                             elem_size: int = 1) -> CollectiveSchedule:
    """Reduce-scatter half of the ring allreduce; position ``i`` ends owning chunk ``(i + 1) mod N``."""
    full = plan_ring_allreduce(group, rank, size_bytes, coll_id=coll_id, elem_size=elem_size)
    return replace(full, steps=full.steps[: group.size - 1], coll_type=CollType.REDUCESCATTER)


def reduce_scatter_owner(position: int, n: int) -> int:
    """Chunk index held fully reduced by ``position`` after a ring reduce-scatter."""
    return (position + 1) % n


def plan_ring_allgather(group: CommGroup, rank: int, contrib_bytes: int, *, coll_id: int = 0,
                        elem_size: int = 1) -> CollectiveSchedule:
    i = _position(group, rank)
    n = group.size
    if contrib_bytes < 0:
        raise ValueError("contrib_bytes must be >= 0")
    if contrib_bytes % elem_size:
        raise ValueError(f"size {contrib_bytes} is not a multiple of the element size {elem_size}")
    succ, pred = group.members[(i + 1) % n], group.members[(i - 1) % n]
    steps = []
    for s in range(n - 1):
        out, inc = (i - s) % n, (i - s - 1) % n
        steps.append(Step(
            (Msg(succ, contrib_bytes, encode_tag(coll_id, s, out), out),),
            (Msg(pred, contrib_bytes, encode_tag(coll_id, s, inc), inc),),
        ))
    return CollectiveSchedule(coll_id, rank, tuple(steps), CollType.ALLGATHER, group, elem_size)


def plan_pairwise_alltoall(group: CommGroup, rank: int, sendbuf_bytes: int, *, coll_id: int = 0,
                           elem_size: int = 1) -> CollectiveSchedule:
    """Pairwise exchange: at step ``k`` send block ``i + k`` and receive from ``i - k``.

    Send blocks use slots ``0..N-1`` (by destination); received blocks land in
    slots ``N..2N-1`` (by source).
    """
    i = _position(group, rank)
    n = group.size
    if sendbuf_bytes < 0:
        raise ValueError("sendbuf_bytes must be >= 0")
    sizes = _chunk_sizes(sendbuf_bytes, n, elem_size)
    steps = []
    for k in range(1, n):
        dst, src = (i + k) % n, (i - k) % n
        steps.append(Step(
            (Msg(group.members[dst], sizes[dst], encode_tag(coll_id, k - 1, i), dst),),
            (Msg(group.members[src], sizes[i], encode_tag(coll_id, k - 1, src), n + src),),
        ))
    return CollectiveSchedule(coll_id, rank, tuple(steps), CollType.ALLTOALL, group, elem_size)


def plan_binomial_broadcast(group: CommGroup, root: int, rank: int, size_bytes: int, *,
                            coll_id: int = 0, elem_size: int = 1) -> CollectiveSchedule:
    """Binomial tree: in round ``k`` relative ids below ``2**k`` forward to id ``+ 2**k``."""
    i = _position(group, rank)
    r = _position(group, root)
    n = group.size
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    v = (i - r) % n
    rounds = math.ceil(math.log2(n)) if n > 1 else 0
    steps = []
    for k in range(rounds):
        half = 1 << k
        sends: tuple[Msg, ...] = ()
        recvs: tuple[Msg, ...] = ()
        if v < half and v + half < n:
            dst = v + half
            sends = (Msg(group.members[(dst + r) % n], size_bytes, encode_tag(coll_id, k, dst), 0),)
        elif half <= v < 2 * half:
            src = v - half
            recvs = (Msg(group.members[(src + r) % n], size_bytes, encode_tag(coll_id, k, v), 0),)
        if sends or recvs:
            steps.append(Step(sends, recvs))
    return CollectiveSchedule(coll_id, rank, tuple(steps), CollType.BROADCAST, group, elem_size)


# ---------------------------------------------------------------------------
# custom schedules


class CustomScheduleError(ValueError):
    pass


def _parse_custom(source) -> dict:
    if isinstance(source, (bytes, str)):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise CustomScheduleError(f"malformed schedule document: {exc}") from None
    else:
        doc = source
    if not isinstance(doc, dict) or not {"coll_id", "group_id", "ranks"} <= set(doc):
        raise CustomScheduleError("schedule document needs coll_id, group_id and ranks")
    return doc


def validate_custom_schedule(source, group: CommGroup) -> dict[int, CollectiveSchedule]:
    """Check a whole custom-schedule document and return every rank's schedule."""
    doc = _parse_custom(source)
    coll_id = int(doc["coll_id"])
    if int(doc["group_id"]) != group.group_id:
        raise CustomScheduleError(f"schedule is for group {doc['group_id']}, not {group.group_id}")
    members = set(group.members)
    schedules: dict[int, CollectiveSchedule] = {}
    sends: Counter = Counter()
    recvs: Counter = Counter()
    send_tags: Counter = Counter()
    recv_tags: Counter = Counter()
    for key, body in doc["ranks"].items():
        rank = int(key)
        if rank not in members:
            raise CustomScheduleError(f"unknown peer: rank {rank} is not in group {group.group_id}")
        steps = []
        for raw in body.get("steps", []):
            parts = {}
            for side in ("sends", "recvs"):
                msgs = []
                for m in raw.get(side, []):
                    peer, nbytes, tag = int(m["peer"]), int(m["bytes"]), int(m["tag"])
                    if peer not in members or peer == rank:
                        raise CustomScheduleError(f"unknown peer {peer} in rank {rank} {side}")
                    if nbytes < 0:
                        raise CustomScheduleError(f"negative bytes in rank {rank} {side}")
                    if not 0 <= tag < 1 << 32:
                        raise CustomScheduleError(f"tag {tag} outside 32 bits")
                    msgs.append(Msg(peer, nbytes, (coll_id << 32) | tag))
                    if side == "sends":
                        sends[(rank, peer, nbytes, tag)] += 1
                        send_tags[tag] += 1
                    else:
                        recvs[(peer, rank, nbytes, tag)] += 1
                        recv_tags[tag] += 1
                parts[side] = tuple(msgs)
            steps.append(Step(parts["sends"], parts["recvs"]))
        schedules[rank] = CollectiveSchedule(coll_id, rank, tuple(steps), None, group)
    for counter in (send_tags, recv_tags):
        dup = sorted(t for t, c in counter.items() if c > 1)
        if dup:
            raise CustomScheduleError(f"duplicate tag {dup[0]}")
    if sends != recvs:
        src, dst, nbytes, tag = sorted((sends - recvs) + (recvs - sends))[0]
        raise CustomScheduleError(f"unmatched message: {src} -> {dst}, {nbytes} bytes, tag {tag}")
    for m in group.members:
        schedules.setdefault(m, CollectiveSchedule(coll_id, m, (), None, group))
    return schedules


def load_custom_schedule(source, group: CommGroup, rank: int) -> CollectiveSchedule:
    _position(group, rank)
    return validate_custom_schedule(source, group)[rank]


# ---------------------------------------------------------------------------
# verification buffers


def initial_slots(coll_type: CollType, group: CommGroup, rank: int, data: np.ndarray,
                  root: int | None = None) -> dict[int, np.ndarray]:
    """Split a rank's input elements into the slots its schedule reads and writes."""
    n, i = group.size, _position(group, rank)
    data = np.asarray(data, dtype=ELEM_DTYPE)
    if coll_type in (CollType.ALLREDUCE, CollType.REDUCESCATTER):
        return dict(enumerate(np.array_split(data, _bounds(len(data), n))))
    if coll_type is CollType.ALLGATHER:
        slots = {k: np.zeros(len(data), ELEM_DTYPE) for k in range(n)}
        slots[i] = data.copy()
        return slots
    if coll_type is CollType.BROADCAST:
        root = group.members[0] if root is None else root
        return {0: data.copy() if rank == root else np.zeros(len(data), ELEM_DTYPE)}
    if coll_type is CollType.ALLTOALL:
        blocks = np.array_split(data, _bounds(len(data), n))
        slots = {k: b.copy() for k, b in enumerate(blocks)}
        slots[n + i] = blocks[i].copy()
        return slots
    raise ValueError(f"no verification layout for {coll_type}")


def _bounds(total: int, parts: int) -> list[int]:
    sizes = balanced_split(total, parts)
    return list(np.cumsum(sizes)[:-1])


def collect_result(coll_type: CollType, group: CommGroup, rank: int, slots: Mapping[int, np.ndarray]) -> np.ndarray:
    n, i = group.size, _position(group, rank)
    if coll_type in (CollType.ALLREDUCE, CollType.ALLGATHER):
        return np.concatenate([slots[k] for k in range(n)])
    if coll_type is CollType.REDUCESCATTER:
        return slots[reduce_scatter_owner(i, n)] if n > 1 else slots[0]
    if coll_type is CollType.BROADCAST:
        return slots[0]
    if coll_type is CollType.ALLTOALL:
        return np.concatenate([slots[n + k] for k in range(n)])
    raise ValueError(f"no verification layout for {coll_type}")


# ---------------------------------------------------------------------------
# execution


class CollectiveExecution:
    """Drive one schedule over an endpoint.

    ``on_done(t)`` fires once, with the time of the last local completion
    (or the start time for an empty schedule). With ``slots`` given, real
    data is sent and received: reducing receives add elementwise with
    64-bit wraparound, others overwrite.
    """

    def __init__(self, schedule: CollectiveSchedule, endpoint: Endpoint, on_done: Callable[[float], None],
                 now: Callable[[], float], slots: dict[int, np.ndarray] | None = None):
        self.schedule = schedule
        self.endpoint = endpoint
        self.on_done = on_done
        self.now = now
        self.slots = slots
        self.step = -1
        self.pending: dict[int, Msg] = {}
        self._recv_handles: set[int] = set()
        self.finished = False
        self.node_id: int | None = None

    def start(self) -> list[int]:
        return self._advance(self.now())

    def _advance(self, t: float) -> list[int]:
        """Post the next non-empty step; returns the new handles."""
        while True:
            self.step += 1
            if self.step >= len(self.schedule.steps):
                self.finished = True
                self.on_done(t)
                return []
            step = self.schedule.steps[self.step]
            if step.sends or step.recvs:
                break
        handles = []
        for m in step.recvs:
            h = self.endpoint.post_recv(m.peer, m.nbytes, m.tag)
            self.pending[h] = m
            self._recv_handles.add(h)
            handles.append(h)
        for m in step.sends:
            payload = None
            if self.slots is not None and m.chunk is not None:
                payload = self.slots[m.chunk].tobytes()
            h = self.endpoint.post_send(m.peer, m.nbytes, m.tag, payload)
            self.pending[h] = m
            handles.append(h)
        return handles

    def handle(self, c: Completion) -> list[int]:
        """Consume a completion for one of our handles; returns handles of a newly posted step."""
        m = self.pending.pop(c.handle)
        if not c.ok:
            err = LengthMismatchError if c.error and "length mismatch" in c.error else TransportError
            raise err(f"collective {self.schedule.coll_id} rank {self.schedule.rank}: {c.error}")
        if c.handle in self._recv_handles:
            self._recv_handles.discard(c.handle)
            if self.slots is not None and m.chunk is not None and c.payload is not None:
                data = np.frombuffer(c.payload, dtype=ELEM_DTYPE)
                if m.reduce:
                    self.slots[m.chunk] = self.slots[m.chunk] + data
                else:
                    self.slots[m.chunk] = data.copy()
        if self.pending:
            return []
        return self._advance(c.timestamp_us)


def execute_collective(schedule: CollectiveSchedule, transport: Endpoint, completion_sink: Callable[[float], None],
                       now: Callable[[], float], slots: dict[int, np.ndarray] | None = None) -> CollectiveExecution:
    """Start ``schedule`` on ``transport``; feed completions to the returned execution's ``handle``."""
    ex = CollectiveExecution(schedule, transport, completion_sink, now, slots)
    ex.start()
    return ex


# ---------------------------------------------------------------------------
# per-rank engines


DEFAULT_ALGORITHMS = {
    CollType.ALLREDUCE: "RING",
    CollType.ALLGATHER: "RING",
    CollType.REDUCESCATTER: "RING",
    CollType.ALLTOALL: "PAIRWISE",
    CollType.BROADCAST: "TREE",
}

_BUILTIN = {
    (CollType.ALLREDUCE, "RING"): plan_ring_allreduce,
    (CollType.ALLGATHER, "RING"): plan_ring_allgather,
    (CollType.REDUCESCATTER, "RING"): plan_ring_reduce_scatter,
    (CollType.ALLTOALL, "PAIRWISE"): plan_pairwise_alltoall,
}


def supported_algorithms(coll_type: CollType) -> list[str]:
    names = [a for (t, a) in _BUILTIN if t is coll_type]
    if coll_type is CollType.BROADCAST:
        names.append("TREE")
    return names + ["CUSTOM"]


def plan_collective(node: OperatorNode, group: CommGroup, algorithm: str | tuple = "RING",
                    elem_size: int = 1) -> CollectiveSchedule:
    """Schedule for a COMM_COLL node. ``algorithm`` is a built-in name or ``("CUSTOM", document)``."""
    if isinstance(algorithm, tuple) and algorithm[0] == "CUSTOM":
        return load_custom_schedule(algorithm[1], group, node.rank).retag(node.coll_id)
    if node.coll_type is CollType.BROADCAST and algorithm == "TREE":
        return plan_binomial_broadcast(group, group.members[0], node.rank, node.size_bytes,
                                       coll_id=node.coll_id, elem_size=elem_size)
    planner = _BUILTIN.get((node.coll_type, algorithm))
    if planner is None:
        raise ValueError(f"algorithm {algorithm!r} not available for {node.coll_type.value}")
    return planner(group, node.rank, node.size_bytes, coll_id=node.coll_id, elem_size=elem_size)


def plan_p2p(node: OperatorNode) -> CollectiveSchedule:
    tag = encode_tag(node.coll_id, 0, 0)
    msg = Msg(node.peer, node.size_bytes, tag)
    step = Step(sends=(msg,)) if node.kind is OpKind.COMM_SEND else Step(recvs=(msg,))
    return CollectiveSchedule(node.coll_id, node.rank, (step,))


@dataclass
class CollectiveEngine:
    """Per-rank bridge from communication operators to endpoint traffic.

    ``call_soon`` defers callbacks so completions never re-enter the caller.
    With ``verify`` on, every COMM_COLL carries seeded random 64-bit payloads
    and the inputs/outputs are kept in ``inputs``/``outputs`` by coll_id.
    """

    graph: WorkloadGraph
    rank: int
    endpoint: Endpoint
    now: Callable[[], float]
    call_soon: Callable[[Callable[[], None]], object]
    algorithms: Mapping = field(default_factory=dict)
    verify: bool = False
    seed: int = 0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    _owner: dict = field(default_factory=dict)

    def schedule_for(self, node: OperatorNode) -> CollectiveSchedule:
        if node.kind is OpKind.COMM_COLL:
            algo = self.algorithms.get(node.coll_type, DEFAULT_ALGORITHMS[node.coll_type])
            return plan_collective(node, self.graph.group(node.group_id), algo,
                                   elem_size=ELEM_DTYPE.itemsize if self.verify else 1)
        return plan_p2p(node)

    @property
    def busy(self) -> bool:
        return bool(self._owner)

    def start(self, node: OperatorNode, on_done: Callable[[float], None]) -> None:
        schedule = self.schedule_for(node)
        slots = None
        if self.verify and node.kind is OpKind.COMM_COLL and schedule.coll_type is not None:
            group = self.graph.group(node.group_id)
            rng = np.random.default_rng([self.seed, node.coll_id, self.rank])
            n_elems = node.size_bytes // ELEM_DTYPE.itemsize
            data = rng.integers(0, 2**64, size=n_elems, dtype=np.uint64)
            self.inputs[node.coll_id] = data
            slots = initial_slots(node.coll_type, group, self.rank, data)

        def done(t: float) -> None:
            if slots is not None:
                self.outputs[node.coll_id] = collect_result(node.coll_type, self.graph.group(node.group_id),
                                                            self.rank, slots)
            self.call_soon(lambda: on_done(t))

        ex = CollectiveExecution(schedule, self.endpoint, done, self.now, slots)
        ex.node_id = node.id
        for h in ex.start():
            self._owner[h] = ex

    def pump(self) -> None:
        """Route every available endpoint completion to its collective."""
        for c in self.endpoint.poll():
            if c.handle is None:
                raise TransportError(f"rank {self.rank}: {c.error}")
            ex = self._owner.pop(c.handle, None)
            if ex is None:
                raise TransportError(f"rank {self.rank}: completion for unknown handle {c.handle}")
            try:
                handles = ex.handle(c)
            except TransportError as exc:
                raise type(exc)(f"node {ex.node_id}: {exc}") from exc
            for h in handles:
                self._owner[h] = ex


class StubCommEngine:
    """Communication with fixed durations instead of traffic (virtual mode only).

    A communication instance (a collective across its group, or a send/recv
    pair) completes on every participant ``duration`` after the last
    participant arrives.
    """

    def __init__(self, graph: WorkloadGraph, loop, durations: Mapping[int, float] | None = None,
                 default_us: float = 0.0):
        self.graph = graph
        self.loop = loop
        self.durations = dict(durations or {})
        self.default_us = default_us
        self._arrived: dict[int, list[Callable[[float], None]]] = {}

    def duration(self, coll_id: int) -> float:
        return self.durations.get(coll_id, self.default_us)

    def for_rank(self, rank: int) -> "_StubRank":
        return _StubRank(self, rank)

    def _arrive(self, node: OperatorNode, on_done: Callable[[float], None]) -> None:
        need = self.graph.group(node.group_id).size if node.kind is OpKind.COMM_COLL else 2
        waiting = self._arrived.setdefault(node.coll_id, [])
        waiting.append(on_done)
        if len(waiting) == need:
            del self._arrived[node.coll_id]
            end = self.loop.now + self.duration(node.coll_id)
            for cb in waiting:
                self.loop.call_at(end, lambda cb=cb: cb(end))


class _StubRank:
    def __init__(self, stub: StubCommEngine, rank: int):
        self.stub = stub
        self.rank = rank

    def start(self, node: OperatorNode, on_done: Callable[[float], None]) -> None:
        self.stub._arrive(node, on_done)

    def pump(self) -> None:
        pass
