"""Bandwidth metrics, iteration series, critical path, trace export and run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Any, Mapping, Sequence

from .scheduler import OpRecord
from .workload import CollType, OpKind, WorkloadGraph

UNITS = {
    "time": "microseconds since run start",
    "bandwidth": "GB/s, 1 GB = 1e9 bytes",
    "size": "bytes",
}

# Slack below this is treated as zero when comparing measured timestamps.
_EPS_US = 1e-6


def busbw_factor(coll_type: CollType | str, n: int) -> float:
    coll_type = CollType(coll_type)
    if n < 1:
        raise ValueError("group size must be >= 1")
    if coll_type is CollType.ALLREDUCE:
        return 2 * (n - 1) / n
    if coll_type is CollType.BROADCAST:
        return 1.0
    return (n - 1) / n


def compute_bandwidth(coll_type: CollType | str, n: int, size_bytes: int, t_us: float) -> dict[str, float]:
    """``algbw = S / t`` and ``busbw = algbw * factor``, both in decimal GB/s."""
    factor = busbw_factor(coll_type, n)
    if size_bytes == 0:
        return {"algbw": 0.0, "busbw": 0.0}
    if not t_us > 0:
        raise ValueError(f"duration must be > 0 for a {size_bytes}-byte collective")
    algbw = size_bytes / (t_us * 1e3)
    return {"algbw": algbw, "busbw": algbw * factor}


@dataclass(frozen=True)
class CollectiveRecord:
    coll_id: int
    coll_type: str
    group_size: int
    size_bytes: int
    duration_us: float
    algbw_GBps: float
    busbw_GBps: float
    iter: int = 0
    start_us: float = 0.0
    end_us: float = 0.0


@dataclass(frozen=True)
class IterationStat:
    iter: int
    wall_us: float
    min_busbw_GBps: float | None


@dataclass(frozen=True)
class CriticalPath:
    nodes: tuple[tuple, ...]
    length_us: float
    slack: Mapping[tuple, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {"nodes": [list(k) for k in self.nodes], "length_us": self.length_us}


@dataclass
class RunReport:
    mode: str
    records: list[OpRecord]
    collectives: list[CollectiveRecord]
    iterations: list[IterationStat]
    critical_path: dict
    makespan_us: float
    config: dict = field(default_factory=dict)

    def timeline(self, rank: int) -> list[OpRecord]:
        return [r for r in self.records if r.rank == rank]

    def to_dict(self) -> dict:
        return {
            "units": UNITS,
            "mode": self.mode,
            "makespan_us": self.makespan_us,
            "config": self.config,
            "iterations": [asdict(i) for i in self.iterations],
            "collectives": [asdict(c) for c in self.collectives],
            "critical_path": self.critical_path,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n").encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes | str) -> "RunReport":
        doc = json.loads(data)
        return cls(
            mode=doc["mode"],
            records=[OpRecord(**r) for r in doc["records"]],
            collectives=[CollectiveRecord(**c) for c in doc["collectives"]],
            iterations=[IterationStat(**i) for i in doc["iterations"]],
            critical_path=doc["critical_path"],
            makespan_us=doc["makespan_us"],
            config=doc["config"],
        )


class IntegrityError(ValueError):
    pass


class WorkloadMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# critical path


def _instance_key(graph: WorkloadGraph, rank: int, node_id: int) -> tuple:
    node = graph.node(rank, node_id)
    if node.kind.is_comm:
        return ("comm", node.coll_id, 0)
    return ("op", rank, node_id)


def critical_path(records: Sequence[OpRecord], graph: WorkloadGraph) -> CriticalPath:
    """Longest weighted path through the global DAG of a finished run.

    Each communication instance (a collective, or a send/recv pair) is one
    node shared by its participants, weighted ``min(end) - max(start)``
    (floored at zero); other operators weigh ``end - start``. Also returns
    every node's slack: how much it could grow without stretching the path.
    """
    by_node = {(r.rank, r.node_id): r for r in records}
    for n in graph.all_nodes():
        if (n.rank, n.id) not in by_node:
            raise IntegrityError(f"no record for rank {n.rank} node {n.id}")
        rec = by_node[(n.rank, n.id)]
        if rec.end_us < rec.start_us:
            raise IntegrityError(f"rank {n.rank} node {n.id} ends before it starts")
        for d in n.deps:
            dep = by_node.get((n.rank, d))
            if dep is None or dep.end_us > rec.start_us + _EPS_US:
                raise IntegrityError(f"rank {n.rank} node {n.id} starts before its dependency {d} ends")

    starts: dict[tuple, list[float]] = {}
    ends: dict[tuple, list[float]] = {}
    preds: dict[tuple, set[tuple]] = {}
    for n in graph.all_nodes():
        key = _instance_key(graph, n.rank, n.id)
        rec = by_node[(n.rank, n.id)]
        starts.setdefault(key, []).append(rec.start_us)
        ends.setdefault(key, []).append(rec.end_us)
        p = preds.setdefault(key, set())
        for d in n.deps:
            dk = _instance_key(graph, n.rank, d)
            if dk != key:
                p.add(dk)
    weight = {k: max(0.0, min(ends[k]) - max(starts[k])) if k[0] == "comm" else ends[k][0] - starts[k][0]
              for k in starts}
    try:
        order = list(TopologicalSorter({k: sorted(v) for k, v in sorted(preds.items())}).static_order())
    except CycleError as exc:
        raise IntegrityError(f"dependency cycle among communication instances: {exc.args[1]}") from None

    head: dict[tuple, float] = {}
    best_pred: dict[tuple, tuple | None] = {}
    for k in order:
        h, bp = 0.0, None
        for p in sorted(preds[k]):
            v = head[p] + weight[p]
            if v > h:
                h, bp = v, p
        head[k], best_pred[k] = h, bp

    succs: dict[tuple, list[tuple]] = {k: [] for k in order}
    for k, ps in preds.items():
        for p in ps:
            succs[p].append(k)
    tail: dict[tuple, float] = {}
    for k in reversed(order):
        tail[k] = max((weight[s] + tail[s] for s in succs[k]), default=0.0)

    if not order:
        return CriticalPath((), 0.0, {})
    length = max(head[k] + weight[k] for k in order)
    end = min((k for k in order if head[k] + weight[k] == length), key=lambda k: (-head[k], k))
    path = [end]
    while best_pred[path[-1]] is not None:
        path.append(best_pred[path[-1]])
    slack = {k: length - (head[k] + weight[k] + tail[k]) for k in order}
    return CriticalPath(tuple(reversed(path)), length, slack)


def makespan(records: Sequence[OpRecord]) -> float:
    return max((r.end_us for r in records), default=0.0)


# ---------------------------------------------------------------------------
# report assembly


def node_iterations(graph: WorkloadGraph) -> dict[tuple[int, int], int]:
    """Iteration index of every node, from the ``iter`` markers in id order (0 if unmarked)."""
    out = {}
    for r in range(graph.num_ranks):
        current = 0
        for n in sorted(graph.rank_nodes(r), key=lambda n: n.id):
            if n.iter is not None:
                current = n.iter
            out[(r, n.id)] = current
    return out


def collective_records(graph: WorkloadGraph, records: Sequence[OpRecord]) -> list[CollectiveRecord]:
    iters = node_iterations(graph)
    spans: dict[int, list] = {}
    for rec in records:
        node = graph.node(rec.rank, rec.node_id)
        if node.kind is not OpKind.COMM_COLL:
            continue
        s = spans.setdefault(node.coll_id, [node, math.inf, -math.inf, iters[(rec.rank, rec.node_id)]])
        s[1] = min(s[1], rec.start_us)
        s[2] = max(s[2], rec.end_us)
        s[3] = min(s[3], iters[(rec.rank, rec.node_id)])
    out = []
    for cid in sorted(spans):
        node, start, end, it = spans[cid]
        n = graph.group(node.group_id).size
        dur = end - start
        bw = compute_bandwidth(node.coll_type, n, node.size_bytes, dur) if dur > 0 else {"algbw": 0.0, "busbw": 0.0}
        out.append(CollectiveRecord(cid, node.coll_type.value, n, node.size_bytes, dur, bw["algbw"], bw["busbw"],
                                    it, start, end))
    return out


def iteration_stats(graph: WorkloadGraph, records: Sequence[OpRecord],
                    collectives: Sequence[CollectiveRecord]) -> list[IterationStat]:
    """Wall time of iteration ``i`` is its last end minus the last end of iteration ``i - 1``."""
    iters = node_iterations(graph)
    last_end: dict[int, float] = {}
    for rec in records:
        i = iters[(rec.rank, rec.node_id)]
        last_end[i] = max(last_end.get(i, -math.inf), rec.end_us)
    out, prev = [], 0.0
    for i in sorted(last_end):
        bws = [c.busbw_GBps for c in collectives if c.iter == i]
        out.append(IterationStat(i, last_end[i] - prev, min(bws) if bws else None))
        prev = last_end[i]
    return out


def build_report(graph: WorkloadGraph, records: Sequence[OpRecord], mode: str, config: Mapping | None = None) -> RunReport:
    records = sorted(records, key=lambda r: (r.rank, r.start_us, r.node_id))
    colls = collective_records(graph, records)
    cp = critical_path(records, graph)
    return RunReport(mode, records, colls, iteration_stats(graph, records, colls), cp.to_dict(), makespan(records),
                     dict(config or {}))


# ---------------------------------------------------------------------------
# export and comparison


TRACE_JSON, CSV_ITER, REPORT_JSON = "TRACE_JSON", "CSV_ITER", "REPORT_JSON"


def export_trace(report: RunReport, fmt: str) -> bytes:
    if fmt == TRACE_JSON:
        events = [{"name": f"{r.kind} {r.node_id}", "ph": "X", "pid": r.rank, "tid": 0,
                   "ts": r.start_us, "dur": r.end_us - r.start_us} for r in report.records]
        return json.dumps(events).encode("utf-8")
    if fmt == CSV_ITER:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "wall_us", "min_busbw_GBps"])
        for it in report.iterations:
            w.writerow([it.iter, repr(it.wall_us), "" if it.min_busbw_GBps is None else repr(it.min_busbw_GBps)])
        return buf.getvalue().encode("utf-8")
    if fmt == REPORT_JSON:
        return report.to_json()
    raise ValueError(f"unknown export format {fmt!r}")


DEFAULT_THRESHOLD = 1.25


def compare_runs(measured: RunReport, predicted: RunReport, threshold: float = DEFAULT_THRESHOLD) -> dict[str, Any]:
    """Per-collective ``measured / predicted`` duration ratios; ratios above ``threshold`` are flagged."""
    m = {c.coll_id: c for c in measured.collectives}
    p = {c.coll_id: c for c in predicted.collectives}
    if set(m) != set(p):
        raise WorkloadMismatchError(
            f"collective sets differ: {len(set(m) - set(p))} only measured, {len(set(p) - set(m))} only predicted")
    rows = []
    for cid in sorted(m):
        a, b = m[cid], p[cid]
        if a.coll_type != b.coll_type or a.size_bytes != b.size_bytes:
            raise WorkloadMismatchError(f"collective {cid} differs in type or size")
        if b.duration_us > 0:
            ratio = a.duration_us / b.duration_us
        else:
            ratio = 1.0 if a.duration_us == 0 else math.inf
        rows.append({"coll_id": cid, "iter": a.iter, "measured_us": a.duration_us,
                     "predicted_us": b.duration_us, "ratio": ratio, "flagged": ratio > threshold})
    flagged = [r for r in rows if r["flagged"]]
    return {
        "threshold": threshold,
        "collectives": rows,
        "flagged": [r["coll_id"] for r in flagged],
        "onset_iter": min((r["iter"] for r in flagged), default=None),
    }
