"""Per-rank workload dependency graphs: types, parsing, validation, synthesis.

A workload is a set of per-rank DAGs. Vertices are operators (local compute or
memory work emulated as a delay, or a communication operator); edges are
intra-rank dependencies. Communication operators on different ranks are tied
together by a shared ``coll_id``.
"""

from __future__ import annotations

import enum
import json
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

SCHEMA_VERSION = 1


class OpKind(str, enum.Enum):
    COMPUTE = "COMPUTE"
    MEMORY = "MEMORY"
    COMM_COLL = "COMM_COLL"
    COMM_SEND = "COMM_SEND"
    COMM_RECV = "COMM_RECV"

    @property
    def is_comm(self) -> bool:
        return self in (OpKind.COMM_COLL, OpKind.COMM_SEND, OpKind.COMM_RECV)


class CollType(str, enum.Enum):
    ALLREDUCE = "ALLREDUCE"
    ALLGATHER = "ALLGATHER"
    REDUCESCATTER = "REDUCESCATTER"
    ALLTOALL = "ALLTOALL"
    BROADCAST = "BROADCAST"


# Fields each kind must carry (besides id, rank, kind, deps) and may not go without.
_KIND_FIELDS = {
    OpKind.COMPUTE: ("duration_us",),
    OpKind.MEMORY: ("duration_us",),
    OpKind.COMM_COLL: ("coll_type", "size_bytes", "group_id", "coll_id"),
    OpKind.COMM_SEND: ("size_bytes", "peer", "group_id", "coll_id"),
    OpKind.COMM_RECV: ("size_bytes", "peer", "group_id", "coll_id"),
}
_OPTIONAL_FIELDS = ("duration_us", "coll_type", "size_bytes", "peer", "group_id", "coll_id")
_NODE_KEY_ORDER = ("id", "rank", "kind") + _OPTIONAL_FIELDS + ("deps", "iter")


class WorkloadError(ValueError):
    """Base class for workload parse/validation failures."""


class WorkloadSyntaxError(WorkloadError):
    pass


class WorkloadSemanticError(WorkloadError):
    """Raised by :func:`parse_workload` when the graph violates an invariant.

    ``violations`` holds every violation found; each names the rank and node.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class OperatorNode:
    id: int
    rank: int
    kind: OpKind
    duration_us: int | None = None
    coll_type: CollType | None = None
    size_bytes: int | None = None
    peer: int | None = None
    group_id: int | None = None
    coll_id: int | None = None
    deps: tuple[int, ...] = ()
    # Iteration marker: set on the first node of each iteration.
    iter: int | None = None

    def to_dict(self) -> dict:
        out: dict = {"id": self.id, "rank": self.rank, "kind": self.kind.value}
        for name in _OPTIONAL_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value.value if isinstance(value, enum.Enum) else value
        out["deps"] = list(self.deps)
        if self.iter is not None:
            out["iter"] = self.iter
        return out


@dataclass(frozen=True)
class CommGroup:
    group_id: int
    members: tuple[int, ...]

    def index(self, rank: int) -> int:
        try:
            return self.members.index(rank)
        except ValueError:
            raise ValueError(f"rank {rank} not in group {self.group_id}") from None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class WorkloadGraph:
    num_ranks: int
    groups: tuple[CommGroup, ...] = ()
    nodes: Mapping[int, tuple[OperatorNode, ...]] = field(default_factory=dict)

    def rank_nodes(self, rank: int) -> tuple[OperatorNode, ...]:
        return tuple(self.nodes.get(rank, ()))

    @cached_property
    def _group_index(self) -> dict[int, CommGroup]:
        out: dict[int, CommGroup] = {}
        for g in self.groups:
            out.setdefault(g.group_id, g)
        return out

    @cached_property
    def _node_index(self) -> dict[tuple[int, int], OperatorNode]:
        out: dict[tuple[int, int], OperatorNode] = {}
        for rank, nodes in self.nodes.items():
            for n in nodes:
                out.setdefault((rank, n.id), n)
        return out

    def group(self, group_id: int) -> CommGroup:
        try:
            return self._group_index[group_id]
        except KeyError:
            raise KeyError(f"unknown group {group_id}") from None

    def node(self, rank: int, node_id: int) -> OperatorNode:
        try:
            return self._node_index[(rank, node_id)]
        except KeyError:
            raise KeyError(f"no node {node_id} on rank {rank}") from None

    def all_nodes(self) -> Iterable[OperatorNode]:
        for rank in range(self.num_ranks):
            yield from self.rank_nodes(rank)

    def __len__(self) -> int:
        return sum(len(v) for v in self.nodes.values())


# ---------------------------------------------------------------------------
# (de)serialization


def serialize_workload(graph: WorkloadGraph) -> bytes:
    doc = {
        "version": SCHEMA_VERSION,
        "num_ranks": graph.num_ranks,
        "groups": [{"group_id": g.group_id, "members": list(g.members)} for g in graph.groups],
        "nodes": {str(r): [n.to_dict() for n in graph.rank_nodes(r)] for r in range(graph.num_ranks)},
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def _expect_int(value, where: str, minimum: int | None = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise WorkloadSyntaxError(f"{where}: expected integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise WorkloadSyntaxError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _node_from_dict(obj, rank_key: int) -> OperatorNode:
    if not isinstance(obj, dict):
        raise WorkloadSyntaxError(f"rank {rank_key}: node must be an object, got {obj!r}")
    unknown = set(obj) - set(_NODE_KEY_ORDER)
    nid = obj.get("id")
    where = f"rank {rank_key} node {nid}"
    if unknown:
        raise WorkloadSyntaxError(f"{where}: unknown fields {sorted(unknown)}")
    for key in ("id", "rank", "kind"):
        if key not in obj:
            raise WorkloadSyntaxError(f"{where}: missing field {key!r}")
    try:
        kind = OpKind(obj["kind"])
    except ValueError:
        raise WorkloadSyntaxError(f"{where}: unknown kind {obj['kind']!r}") from None
    required = _KIND_FIELDS[kind]
    for name in _OPTIONAL_FIELDS:
        if name in required and name not in obj:
            raise WorkloadSyntaxError(f"{where}: {kind.value} requires {name!r}")
        if name not in required and name in obj:
            raise WorkloadSyntaxError(f"{where}: field {name!r} not allowed for {kind.value}")
    coll_type = None
    if "coll_type" in obj:
        try:
            coll_type = CollType(obj["coll_type"])
        except ValueError:
            raise WorkloadSyntaxError(f"{where}: unknown coll_type {obj['coll_type']!r}") from None
    deps = obj.get("deps", [])
    if not isinstance(deps, list):
        raise WorkloadSyntaxError(f"{where}: deps must be a list")

    def opt(name):
        return _expect_int(obj[name], f"{where} {name}") if name in obj else None

    return OperatorNode(
        id=_expect_int(obj["id"], f"{where} id"),
        rank=_expect_int(obj["rank"], f"{where} rank"),
        kind=kind,
        duration_us=opt("duration_us"),
        coll_type=coll_type,
        size_bytes=opt("size_bytes"),
        peer=opt("peer"),
        group_id=opt("group_id"),
        coll_id=opt("coll_id"),
        deps=tuple(_expect_int(d, f"{where} dep") for d in deps),
        iter=opt("iter"),
    )


def graph_from_dict(doc) -> WorkloadGraph:
    """Build a graph from an already-decoded document (no invariant checks)."""
    if not isinstance(doc, dict):
        raise WorkloadSyntaxError("workload document must be an object")
    unknown = set(doc) - {"version", "num_ranks", "groups", "nodes"}
    if unknown:
        raise WorkloadSyntaxError(f"unknown top-level fields {sorted(unknown)}")
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise WorkloadSyntaxError(f"unsupported version {doc.get('version')!r}")
    if "num_ranks" not in doc:
        raise WorkloadSyntaxError("missing num_ranks")
    num_ranks = _expect_int(doc["num_ranks"], "num_ranks", minimum=1)
    groups = []
    for g in doc.get("groups", []):
        if not isinstance(g, dict) or set(g) != {"group_id", "members"}:
            raise WorkloadSyntaxError(f"malformed group {g!r}")
        if not isinstance(g["members"], list):
            raise WorkloadSyntaxError(f"group {g['group_id']!r}: members must be a list")
        groups.append(
            CommGroup(
                _expect_int(g["group_id"], "group_id", minimum=None),
                tuple(_expect_int(m, "group member") for m in g["members"]),
            )
        )
    raw_nodes = doc.get("nodes", {})
    if not isinstance(raw_nodes, dict):
        raise WorkloadSyntaxError("nodes must be a map rank -> list")
    nodes: dict[int, tuple[OperatorNode, ...]] = {}
    for key, lst in raw_nodes.items():
        try:
            rank = int(key)
        except (TypeError, ValueError):
            raise WorkloadSyntaxError(f"bad rank key {key!r}") from None
        if not isinstance(lst, list):
            raise WorkloadSyntaxError(f"rank {rank}: node list expected")
        nodes[rank] = tuple(_node_from_dict(o, rank) for o in lst)
    return WorkloadGraph(num_ranks, tuple(groups), nodes)


def parse_workload(source: bytes | str) -> WorkloadGraph:
    """Parse and validate a workload document.

    Raises :class:`WorkloadSyntaxError` for malformed documents and
    :class:`WorkloadSemanticError` for graphs that break an invariant.
    """
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WorkloadSyntaxError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise WorkloadSyntaxError(f"malformed document: {exc}") from None
    graph = graph_from_dict(doc)
    violations = validate(graph)
    if violations:
        raise WorkloadSemanticError(violations)
    return graph


def load_workload(path) -> WorkloadGraph:
    with open(path, "rb") as fh:
        return parse_workload(fh.read())


# ---------------------------------------------------------------------------
# validation


def _kahn(nodes: tuple[OperatorNode, ...]) -> tuple[list[int], set[int]]:
    """Topological order of one rank's nodes; second item is the unvisited ids."""
    ids = {n.id for n in nodes}
    indeg = {n.id: 0 for n in nodes}
    children: dict[int, list[int]] = defaultdict(list)
    for n in nodes:
        for d in set(n.deps):
            # self-dependencies are reported separately
            if d in ids and d != n.id:
                indeg[n.id] += 1
                children[d].append(n.id)
    queue = deque(sorted(i for i, k in indeg.items() if k == 0))
    order = []
    while queue:
        nid = queue.popleft()
        order.append(nid)
        for c in sorted(children[nid]):
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    return order, ids - set(order)


def topological_order(graph: WorkloadGraph, rank: int) -> list[int]:
    order, left = _kahn(graph.rank_nodes(rank))
    if left:
        raise WorkloadSemanticError([f"cycle detected rank {rank}"])
    return order


def validate(graph: WorkloadGraph) -> list[str]:
    """Return every invariant violation in ``graph`` (empty list means valid)."""
    out: list[str] = []
    if graph.num_ranks < 1:
        out.append(f"num_ranks must be >= 1, got {graph.num_ranks}")
        return out

    groups: dict[int, CommGroup] = {}
    for g in graph.groups:
        if g.group_id in groups:
            out.append(f"duplicate group {g.group_id}")
        groups[g.group_id] = g
        if not g.members:
            out.append(f"empty group {g.group_id}")
        if len(set(g.members)) != len(g.members):
            out.append(f"duplicate members in group {g.group_id}")
        bad = [m for m in g.members if not 0 <= m < graph.num_ranks]
        if bad:
            out.append(f"group {g.group_id} members out of range {bad}")

    for rank in graph.nodes:
        if not 0 <= rank < graph.num_ranks:
            out.append(f"rank {rank} out of range [0, {graph.num_ranks})")

    colls: dict[int, list[OperatorNode]] = defaultdict(list)
    p2p: dict[int, list[OperatorNode]] = defaultdict(list)

    for rank in sorted(graph.nodes):
        nodes = graph.nodes[rank]
        counts = Counter(n.id for n in nodes)
        for nid, c in sorted(counts.items()):
            if c > 1:
                out.append(f"duplicate node id rank {rank} node {nid}")
        ids = set(counts)
        for n in nodes:
            where = f"rank {rank} node {n.id}"
            if n.rank != rank:
                out.append(f"rank mismatch {where}: node says rank {n.rank}")
            for d in n.deps:
                if d == n.id:
                    out.append(f"self-dependency {where}")
                elif d not in ids:
                    out.append(f"dangling dependency {where} -> {d}")
            required = _KIND_FIELDS[n.kind]
            for name in _OPTIONAL_FIELDS:
                present = getattr(n, name) is not None
                if name in required and not present:
                    out.append(f"missing {name} {where}")
                elif name not in required and present:
                    out.append(f"field {name} not allowed for {n.kind.value} {where}")
            for name in ("duration_us", "size_bytes"):
                v = getattr(n, name)
                if v is not None and v < 0:
                    out.append(f"negative {name} {where}")
            if n.kind.is_comm and n.group_id is not None and n.group_id not in groups:
                out.append(f"unknown group {n.group_id} {where}")
            if n.kind in (OpKind.COMM_SEND, OpKind.COMM_RECV) and n.peer is not None:
                if n.peer == rank:
                    out.append(f"peer equals own rank {where}")
                elif not 0 <= n.peer < graph.num_ranks:
                    out.append(f"peer out of range {where}")
            if n.coll_id is not None:
                if not 0 <= n.coll_id < 2**32:
                    out.append(f"coll_id out of 32-bit range {where}")
                (colls if n.kind is OpKind.COMM_COLL else p2p)[n.coll_id].append(n)
        _, cyclic = _kahn(nodes)
        if cyclic:
            out.append(f"cycle detected rank {rank} (nodes {sorted(cyclic)})")

    for cid in sorted(set(colls) & set(p2p)):
        out.append(f"coll_id {cid} used by both collective and point-to-point operators")

    for cid in sorted(colls):
        insts = colls[cid]
        first = insts[0]
        for n in insts[1:]:
            if (n.coll_type, n.group_id, n.size_bytes) != (first.coll_type, first.group_id, first.size_bytes):
                out.append(f"collective {cid} mismatch rank {n.rank} node {n.id}")
        g = groups.get(first.group_id)
        if g is None:
            continue
        ranks = Counter(n.rank for n in insts)
        for n in insts:
            if n.rank not in g.members:
                out.append(f"collective {cid} rank {n.rank} node {n.id} not in group {g.group_id}")
        for r, c in sorted(ranks.items()):
            if c > 1:
                out.append(f"collective {cid} appears {c} times on rank {r}")
        missing = [m for m in g.members if m not in ranks]
        if missing:
            out.append(f"unmatched collective {cid} (missing on ranks {missing})")

    for cid in sorted(p2p):
        insts = p2p[cid]
        sends = [n for n in insts if n.kind is OpKind.COMM_SEND]
        recvs = [n for n in insts if n.kind is OpKind.COMM_RECV]
        if len(sends) != 1 or len(recvs) != 1:
            locs = ", ".join(f"rank {n.rank} node {n.id}" for n in insts)
            out.append(f"unmatched send/recv {cid} ({len(sends)} sends, {len(recvs)} recvs: {locs})")
            continue
        s, r = sends[0], recvs[0]
        if s.peer != r.rank or r.peer != s.rank:
            out.append(f"send/recv {cid} peers disagree rank {s.rank} node {s.id}")
        if s.size_bytes != r.size_bytes:
            out.append(f"send/recv {cid} size mismatch rank {s.rank} node {s.id}")
        g = groups.get(s.group_id)
        if s.group_id != r.group_id:
            out.append(f"send/recv {cid} group mismatch rank {s.rank} node {s.id}")
        elif g is not None and (s.rank not in g.members or r.rank not in g.members):
            out.append(f"send/recv {cid} endpoints not in group {g.group_id}")

    if not out:
        cycle = _global_cycle(graph)
        if cycle:
            out.append(f"cross-rank dependency cycle through {cycle}")
    return out


def _global_cycle(graph: WorkloadGraph) -> list[str]:
    """Detect deadlocks that only appear once communication instances are merged."""
    key_of: dict[tuple[int, int], tuple] = {}
    for n in graph.all_nodes():
        key_of[(n.rank, n.id)] = ("c", n.coll_id) if n.kind.is_comm else ("n", n.rank, n.id)
    indeg: dict[tuple, int] = {k: 0 for k in set(key_of.values())}
    children: dict[tuple, set] = defaultdict(set)
    for n in graph.all_nodes():
        me = key_of[(n.rank, n.id)]
        for d in n.deps:
            src = key_of[(n.rank, d)]
            if src != me and me not in children[src]:
                children[src].add(me)
                indeg[me] += 1
            elif src == me:
                return [str(me)]
    queue = deque(k for k, v in indeg.items() if v == 0)
    seen = 0
    while queue:
        k = queue.popleft()
        seen += 1
        for c in children[k]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if seen == len(indeg):
        return []
    return sorted(str(k) for k, v in indeg.items() if v > 0)[:8]


# ---------------------------------------------------------------------------
# synthesizers


def balanced_split(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` sizes; the first ``total % parts`` get one extra."""
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def synth_data_parallel(
    num_ranks: int,
    num_layers: int,
    fwd_us: int,
    bwd_us: int,
    grad_bytes: int,
    iterations: int,
) -> WorkloadGraph:
    """Data-parallel training: forward chain, backward chain, one allreduce per layer."""
    if num_ranks < 1 or num_layers < 1 or iterations < 1:
        raise ValueError("num_ranks, num_layers and iterations must be >= 1")
    if fwd_us < 0 or bwd_us < 0 or grad_bytes < 0:
        raise ValueError("durations and grad_bytes must be >= 0")
    per_layer = balanced_split(grad_bytes, num_layers)
    world = CommGroup(0, tuple(range(num_ranks)))
    nodes = {}
    for rank in range(num_ranks):
        lst: list[OperatorNode] = []
        nid = 0
        prev_colls: list[int] = []
        for it in range(iterations):
            prev = None
            for layer in range(num_layers):
                deps = (prev,) if prev is not None else tuple(prev_colls)
                lst.append(
                    OperatorNode(nid, rank, OpKind.COMPUTE, duration_us=fwd_us, deps=deps,
                                 iter=it if layer == 0 else None)
                )
                prev = nid
                nid += 1
            colls = []
            for k, layer in enumerate(reversed(range(num_layers))):
                lst.append(OperatorNode(nid, rank, OpKind.COMPUTE, duration_us=bwd_us, deps=(prev,)))
                prev = nid
                nid += 1
                lst.append(
                    OperatorNode(
                        nid, rank, OpKind.COMM_COLL,
                        coll_type=CollType.ALLREDUCE,
                        size_bytes=per_layer[layer],
                        group_id=world.group_id,
                        coll_id=it * num_layers + k,
                        deps=(prev,),
                    )
                )
                colls.append(nid)
                nid += 1
            prev_colls = colls
        nodes[rank] = tuple(lst)
    return WorkloadGraph(num_ranks, (world,), nodes)


def synth_pipeline(num_ranks: int, microbatches: int, stage_us: int, act_bytes: int) -> WorkloadGraph:
    """Forward-only pipeline: each stage computes a microbatch then hands activations on."""
    if num_ranks < 2:
        raise ValueError("pipeline needs num_ranks >= 2")
    if microbatches < 1:
        raise ValueError("microbatches must be >= 1")
    if stage_us < 0 or act_bytes < 0:
        raise ValueError("stage_us and act_bytes must be >= 0")
    world = CommGroup(0, tuple(range(num_ranks)))
    nodes = {}
    for rank in range(num_ranks):
        lst: list[OperatorNode] = []
        nid = 0
        prev_compute = None
        for mb in range(microbatches):
            deps: list[int] = []
            if rank > 0:
                lst.append(
                    OperatorNode(nid, rank, OpKind.COMM_RECV, size_bytes=act_bytes, peer=rank - 1,
                                 group_id=0, coll_id=(rank - 1) * microbatches + mb)
                )
                deps.append(nid)
                nid += 1
            if prev_compute is not None:
                deps.append(prev_compute)
            lst.append(OperatorNode(nid, rank, OpKind.COMPUTE, duration_us=stage_us, deps=tuple(deps)))
            prev_compute = nid
            nid += 1
            if rank < num_ranks - 1:
                lst.append(
                    OperatorNode(nid, rank, OpKind.COMM_SEND, size_bytes=act_bytes, peer=rank + 1,
                                 group_id=0, coll_id=rank * microbatches + mb, deps=(prev_compute,))
                )
                nid += 1
        nodes[rank] = tuple(lst)
    return WorkloadGraph(num_ranks, (world,), nodes)


def synthesize(spec: Mapping) -> WorkloadGraph:
    """Dispatch a synthesizer spec such as ``{"kind": "data_parallel", ...}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "data_parallel":
            return synth_data_parallel(**spec)
        if kind == "pipeline":
            return synth_pipeline(**spec)
    except TypeError as exc:
        raise ValueError(f"bad {kind} synth spec: {exc}") from None
    raise ValueError(f"unknown synth kind {kind!r} (expected data_parallel or pipeline)")
