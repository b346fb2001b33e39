from __future__ import annotations

import csv
import io
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from loomnet import metrics
from loomnet.metrics import (
    CollectiveRecord,
    IntegrityError,
    RunReport,
    WorkloadMismatchError,
    build_report,
    compare_runs,
    compute_bandwidth,
    critical_path,
    export_trace,
)
from loomnet.runtime import StubConfig, run_virtual
from loomnet.scheduler import OpRecord
from loomnet.workload import CollType, CommGroup, OperatorNode, OpKind, WorkloadGraph, synth_data_parallel

from oracles import longest_path_makespan

GIB = 1 << 30


def compute(rank, nid, dur, deps=(), it=None):
    return OperatorNode(nid, rank, OpKind.COMPUTE, duration_us=dur, deps=tuple(deps), iter=it)


def diamond():
    return WorkloadGraph(1, (), {0: (compute(0, 0, 10), compute(0, 1, 20, [0]), compute(0, 2, 30, [0]),
                                     compute(0, 3, 5, [1, 2]))})


# -- bandwidth ----------------------------------------------------------------------------


def test_allreduce_16_ranks_one_gib():
    bw = compute_bandwidth(CollType.ALLREDUCE, 16, GIB, 100_000)
    assert round(bw["algbw"], 2) == 10.74
    assert round(bw["busbw"], 2) == 20.13


def test_broadcast_factor_is_one():
    for n in (1, 2, 7, 64):
        bw = compute_bandwidth("BROADCAST", n, 12345, 17.0)
        assert bw["busbw"] == bw["algbw"]


def test_allreduce_two_ranks_factor_one():
    bw = compute_bandwidth("ALLREDUCE", 2, 1000, 3.0)
    assert bw["busbw"] == pytest.approx(bw["algbw"])


@pytest.mark.parametrize("ct", ["ALLGATHER", "REDUCESCATTER", "ALLTOALL"])
def test_n_minus_one_over_n_factor(ct):
    bw = compute_bandwidth(ct, 4, 4000, 1.0)
    assert bw["busbw"] == pytest.approx(bw["algbw"] * 0.75)


def test_zero_duration_and_zero_size():
    with pytest.raises(ValueError):
        compute_bandwidth("ALLREDUCE", 4, 10, 0)
    assert compute_bandwidth("ALLREDUCE", 4, 0, 0) == {"algbw": 0.0, "busbw": 0.0}


@given(st.sampled_from(list(CollType)), st.integers(1, 64), st.integers(1, 1 << 40),
       st.floats(1e-3, 1e9), st.integers(1, 1 << 40), st.floats(1e-3, 1e9))
def test_ratio_depends_only_on_type_and_size(ct, n, s1, t1, s2, t2):
    a = compute_bandwidth(ct, n, s1, t1)
    b = compute_bandwidth(ct, n, s2, t2)
    assert a["busbw"] / a["algbw"] == pytest.approx(b["busbw"] / b["algbw"], rel=1e-12)


# -- critical path ----------------------------------------------------------------------


def test_chain_path_is_the_chain():
    g = WorkloadGraph(1, (), {0: (compute(0, 0, 3), compute(0, 1, 4, [0]), compute(0, 2, 5, [1]))})
    cp = critical_path(run_virtual(g).records, g)
    assert cp.nodes == (("op", 0, 0), ("op", 0, 1), ("op", 0, 2)) and cp.length_us == 12


def test_diamond_path():
    g = diamond()
    run = run_virtual(g)
    cp = critical_path(run.records, g)
    assert cp.nodes == (("op", 0, 0), ("op", 0, 2), ("op", 0, 3))
    assert cp.length_us == 45
    assert cp.slack[("op", 0, 1)] == 10
    assert all(cp.slack[k] == 0 for k in cp.nodes)


def test_two_independent_ranks():
    g = WorkloadGraph(2, (), {0: (compute(0, 0, 5), compute(0, 1, 5, [0])),
                              1: (compute(1, 0, 7), compute(1, 1, 6, [0]))})
    cp = critical_path(run_virtual(g).records, g)
    assert cp.length_us == 13 and cp.nodes == (("op", 1, 0), ("op", 1, 1))


def test_collective_ties_ranks():
    group = CommGroup(0, (0, 1))
    nodes = {r: (compute(r, 0, 10 * (r + 1)),
                 OperatorNode(1, r, OpKind.COMM_COLL, coll_type=CollType.ALLREDUCE, size_bytes=8, group_id=0,
                              coll_id=0, deps=(0,)),
                 compute(r, 2, 5 if r == 0 else 1, [1])) for r in range(2)}
    g = WorkloadGraph(2, (group,), nodes)
    run = run_virtual(g, stub=StubConfig({0: 4.0}))
    cp = critical_path(run.records, g)
    assert cp.nodes == (("op", 1, 0), ("comm", 0, 0), ("op", 0, 2))
    assert cp.length_us == 20 + 4 + 5 == pytest.approx(longest_path_makespan(g, {0: 4.0}))


def test_path_no_longer_than_makespan_and_reorder_invariant():
    g = synth_data_parallel(4, 3, 10, 20, 4096, 2)
    run = run_virtual(g, stub=StubConfig(default_us=7.0))
    cp = critical_path(run.records, g)
    assert cp.length_us <= metrics.makespan(run.records) + 1e-9
    shuffled = list(run.records)
    random.Random(3).shuffle(shuffled)
    cp2 = critical_path(shuffled, g)
    assert cp2.length_us == cp.length_us and cp2.nodes == cp.nodes


def test_integrity_error():
    g = diamond()
    recs = run_virtual(g).records
    bad = [OpRecord(r.rank, r.node_id, r.kind, r.start_us - 15, r.end_us) if r.node_id == 3 else r for r in recs]
    with pytest.raises(IntegrityError, match="dependency"):
        critical_path(bad, g)
    with pytest.raises(IntegrityError, match="no record"):
        critical_path(recs[:-1], g)


# -- export -------------------------------------------------------------------------------


def empty_report():
    g = WorkloadGraph(1, (), {0: ()})
    return build_report(g, [], "VIRTUAL")


def test_export_empty():
    r = empty_report()
    assert json.loads(export_trace(r, metrics.TRACE_JSON)) == []
    assert export_trace(r, metrics.CSV_ITER).decode() == "iter,wall_us,min_busbw_GBps\n"


def test_export_one_op():
    g = WorkloadGraph(1, (), {0: (compute(0, 0, 9),)})
    rep = build_report(g, run_virtual(g).records, "VIRTUAL")
    (ev,) = json.loads(export_trace(rep, metrics.TRACE_JSON))
    assert (ev["ph"], ev["pid"], ev["ts"], ev["dur"]) == ("X", 0, 0.0, 9.0)
    assert "name" in ev


def test_export_iteration_rows():
    g = synth_data_parallel(2, 2, 10, 10, 1 << 16, 5)
    rep = build_report(g, run_virtual(g).records, "VIRTUAL")
    rows = list(csv.DictReader(io.StringIO(export_trace(rep, metrics.CSV_ITER).decode())))
    assert [int(r["iter"]) for r in rows] == list(range(5))
    assert all(float(r["wall_us"]) > 0 and float(r["min_busbw_GBps"]) > 0 for r in rows)


def test_export_unknown_format():
    with pytest.raises(ValueError):
        export_trace(empty_report(), "XML")


def test_report_round_trip_and_timelines():
    g = synth_data_parallel(3, 2, 10, 20, 1 << 20, 2)
    rep = build_report(g, run_virtual(g).records, "VIRTUAL", {"seed": 1})
    back = RunReport.from_json(export_trace(rep, metrics.REPORT_JSON))
    assert back == rep
    for r in range(3):
        ids = [rec.node_id for rec in rep.timeline(r)]
        assert sorted(ids) == sorted(n.id for n in g.rank_nodes(r))
    assert rep.critical_path["length_us"] <= rep.makespan_us + 1e-9
    assert json.loads(rep.to_json())["units"]["bandwidth"].startswith("GB/s")


# -- comparison ---------------------------------------------------------------------------


def report_with(durations: dict[int, float]) -> RunReport:
    colls = [CollectiveRecord(cid, "ALLREDUCE", 4, 1 << 20, d, 0.0, 0.0, iter=cid) for cid, d in durations.items()]
    return RunReport("VIRTUAL", [], colls, [], {}, 0.0)


def test_compare_identical():
    rep = report_with({i: 100.0 for i in range(5)})
    res = compare_runs(rep, rep)
    assert all(r["ratio"] == 1.0 for r in res["collectives"])
    assert res["flagged"] == [] and res["onset_iter"] is None


@pytest.mark.parametrize("k", [0, 3, 7])
def test_compare_onset(k):
    pred = report_with({i: 100.0 for i in range(10)})
    meas = report_with({i: 200.0 if i >= k else 100.0 for i in range(10)})
    res = compare_runs(meas, pred)
    assert res["onset_iter"] == k and res["flagged"] == list(range(k, 10))


def test_compare_threshold_is_configurable():
    pred = report_with({0: 100.0})
    meas = report_with({0: 120.0})
    assert compare_runs(meas, pred)["flagged"] == []
    assert compare_runs(meas, pred, threshold=1.1)["flagged"] == [0]


def test_compare_mismatch():
    with pytest.raises(WorkloadMismatchError):
        compare_runs(report_with({0: 1.0}), report_with({1: 1.0}))
