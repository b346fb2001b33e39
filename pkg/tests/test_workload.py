from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from loomnet.workload import (
    CollType,
    CommGroup,
    OperatorNode,
    OpKind,
    WorkloadGraph,
    WorkloadSemanticError,
    WorkloadSyntaxError,
    balanced_split,
    parse_workload,
    serialize_workload,
    synth_data_parallel,
    synth_pipeline,
    synthesize,
    topological_order,
    validate,
)

from oracles import is_topological, kahn_unvisited


def compute(rank, nid, dur, deps=()):
    return OperatorNode(nid, rank, OpKind.COMPUTE, duration_us=dur, deps=tuple(deps))


def allreduce(rank, nid, coll_id, size=1024, deps=(), group=0):
    return OperatorNode(nid, rank, OpKind.COMM_COLL, coll_type=CollType.ALLREDUCE, size_bytes=size,
                        group_id=group, coll_id=coll_id, deps=tuple(deps))


def doc(num_ranks, nodes, groups=()):
    return json.dumps({"version": 1, "num_ranks": num_ranks, "groups": list(groups), "nodes": nodes})


def test_parse_empty_graph():
    g = parse_workload(doc(1, {"0": []}))
    assert g.num_ranks == 1 and len(g) == 0


def test_parse_chain_has_chain_order():
    g = parse_workload(doc(1, {"0": [
        {"id": 0, "rank": 0, "kind": "COMPUTE", "duration_us": 100, "deps": []},
        {"id": 1, "rank": 0, "kind": "COMPUTE", "duration_us": 50, "deps": [0]},
    ]}))
    assert topological_order(g, 0) == [0, 1]


def test_parse_rejects_unmatched_collective():
    nodes = {"0": [{"id": 0, "rank": 0, "kind": "COMM_COLL", "coll_type": "ALLREDUCE", "size_bytes": 64,
                    "group_id": 0, "coll_id": 7, "deps": []}], "1": []}
    with pytest.raises(WorkloadSemanticError) as exc:
        parse_workload(doc(2, nodes, [{"group_id": 0, "members": [0, 1]}]))
    assert any(v.startswith("unmatched collective 7") for v in exc.value.violations)


@pytest.mark.parametrize("text", [
    "{not json",
    doc(1, {"0": [{"id": 0, "rank": 0, "kind": "COMPUTE", "duration_us": 5, "deps": [], "bogus": 1}]}),
    doc(1, {"0": [{"id": 0, "rank": 0, "kind": "COMPUTE", "deps": []}]}),
    doc(1, {"0": [{"id": 0, "rank": 0, "kind": "COMPUTE", "duration_us": 5, "size_bytes": 8, "deps": []}]}),
    doc(1, {"0": [{"id": 0, "rank": 0, "kind": "TELEPORT", "duration_us": 5, "deps": []}]}),
    json.dumps({"version": 2, "num_ranks": 1, "groups": [], "nodes": {}}),
])
def test_parse_syntax_errors(text):
    with pytest.raises(WorkloadSyntaxError):
        parse_workload(text)


def test_validate_valid_allreduce():
    g = WorkloadGraph(2, (CommGroup(0, (0, 1)),), {0: (allreduce(0, 0, 1),), 1: (allreduce(1, 0, 1),)})
    assert validate(g) == []


def test_validate_self_dependency():
    g = WorkloadGraph(1, (), {0: (compute(0, 0, 1), compute(0, 1, 1), compute(0, 2, 1), compute(0, 3, 1, [3]))})
    assert validate(g) == ["self-dependency rank 0 node 3"]


def test_validate_cycle():
    g = WorkloadGraph(1, (), {0: (compute(0, 0, 1, [1]), compute(0, 1, 1, [0]))})
    out = validate(g)
    assert len(out) == 1 and out[0].startswith("cycle detected rank 0")
    assert kahn_unvisited([0, 1], [(1, 0), (0, 1)]) == {0, 1}


def test_validate_reports_rank_and_node():
    g = WorkloadGraph(2, (CommGroup(0, (0, 1)),), {
        0: (compute(0, 0, 1, [9]), OperatorNode(1, 0, OpKind.COMM_SEND, size_bytes=4, peer=0, group_id=0, coll_id=3)),
        1: (allreduce(1, 0, 5, group=4),),
    })
    out = validate(g)
    assert "dangling dependency rank 0 node 0 -> 9" in out
    assert "peer equals own rank rank 0 node 1" in out
    assert "unknown group 4 rank 1 node 0" in out
    assert any(v.startswith("unmatched send/recv 3") for v in out)


def test_validate_cross_rank_cycle():
    # rank 0 waits for the send/recv before the collective, rank 1 the other way round
    grp = (CommGroup(0, (0, 1)),)
    g = WorkloadGraph(2, grp, {
        0: (allreduce(0, 0, 1), OperatorNode(1, 0, OpKind.COMM_SEND, size_bytes=4, peer=1, group_id=0, coll_id=2,
                                             deps=(0,))),
        1: (OperatorNode(0, 1, OpKind.COMM_RECV, size_bytes=4, peer=0, group_id=0, coll_id=2),
            allreduce(1, 1, 1, deps=(0,))),
    })
    out = validate(g)
    assert len(out) == 1 and out[0].startswith("cross-rank dependency cycle")


def test_synth_data_parallel_smallest():
    g = synth_data_parallel(2, 1, 10, 20, 1024, 1)
    for r in range(2):
        fwd, bwd, ar = g.rank_nodes(r)
        assert (fwd.kind, bwd.kind, ar.kind) == (OpKind.COMPUTE, OpKind.COMPUTE, OpKind.COMM_COLL)
        assert bwd.deps == (fwd.id,) and ar.deps == (bwd.id,)
        assert ar.size_bytes == 1024 and ar.coll_type is CollType.ALLREDUCE
    assert validate(g) == []


def test_synth_data_parallel_counts():
    g = synth_data_parallel(4, 2, 10, 20, 4096, 2)
    # iterations * (2 * layers compute + layers collectives)
    assert all(len(g.rank_nodes(r)) == 2 * (2 * 2 + 2) for r in range(4))
    assert validate(g) == []


def test_synth_data_parallel_zero_bytes():
    g = synth_data_parallel(2, 2, 10, 20, 0, 1)
    assert validate(g) == []
    assert all(n.size_bytes == 0 for n in g.all_nodes() if n.kind is OpKind.COMM_COLL)


def test_synth_data_parallel_iteration_barrier():
    g = synth_data_parallel(2, 3, 1, 1, 30, 2)
    nodes = g.rank_nodes(0)
    first_of_second = next(n for n in nodes if n.iter == 1)
    ars = {n.id for n in nodes if n.kind is OpKind.COMM_COLL and n.id < first_of_second.id}
    assert set(first_of_second.deps) == ars


def test_synth_pipeline_two_ranks():
    g = synth_pipeline(2, 1, 10, 512)
    c0, s0 = g.rank_nodes(0)
    r1, c1 = g.rank_nodes(1)
    assert (c0.kind, s0.kind, s0.size_bytes, s0.peer) == (OpKind.COMPUTE, OpKind.COMM_SEND, 512, 1)
    assert (r1.kind, r1.size_bytes, r1.peer) == (OpKind.COMM_RECV, 512, 0)
    assert c1.kind is OpKind.COMPUTE and r1.id in c1.deps


def test_synth_pipeline_matching():
    g = synth_pipeline(3, 2, 10, 64)
    assert validate(g) == []
    sends = sorted((n.rank, n.peer, n.size_bytes, n.coll_id) for n in g.all_nodes() if n.kind is OpKind.COMM_SEND)
    recvs = sorted((n.peer, n.rank, n.size_bytes, n.coll_id) for n in g.all_nodes() if n.kind is OpKind.COMM_RECV)
    assert sends == recvs and len(sends) == 4


def test_synth_pipeline_needs_two_ranks():
    with pytest.raises(ValueError):
        synth_pipeline(1, 1, 10, 512)


def test_synthesize_dispatch():
    assert synthesize({"kind": "pipeline", "num_ranks": 2, "microbatches": 1, "stage_us": 1, "act_bytes": 1}).num_ranks == 2
    with pytest.raises(ValueError):
        synthesize({"kind": "tensor_parallel"})


@pytest.mark.parametrize("n", range(2, 9))
@pytest.mark.parametrize("k", range(1, 5))
def test_synthesizers_validate_over_grid(n, k):
    for g in (synth_data_parallel(n, k, 3, 5, 1000, 2), synth_pipeline(n, k, 3, 100)):
        assert validate(g) == []
        for r in range(n):
            deps = {x.id: x.deps for x in g.rank_nodes(r)}
            assert is_topological(topological_order(g, r), deps)


def test_serializer_key_order_is_stable():
    g = synth_pipeline(2, 1, 10, 512)
    text = serialize_workload(g)
    assert list(json.loads(text)) == ["version", "num_ranks", "groups", "nodes"]
    assert serialize_workload(parse_workload(text)) == text


@given(st.integers(2, 6), st.integers(1, 3), st.integers(0, 50), st.integers(0, 50), st.integers(0, 10_000),
       st.integers(1, 3))
def test_round_trip_data_parallel(n, layers, f, b, nbytes, iters):
    g = synth_data_parallel(n, layers, f, b, nbytes, iters)
    assert parse_workload(serialize_workload(g)) == g


@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 50), st.integers(0, 10_000))
def test_round_trip_pipeline(n, mb, us, nbytes):
    g = synth_pipeline(n, mb, us, nbytes)
    assert parse_workload(serialize_workload(g)) == g


@st.composite
def random_rank_graph(draw):
    n = draw(st.integers(1, 12))
    nodes = []
    for i in range(n):
        deps = draw(st.lists(st.integers(0, n - 1), max_size=3, unique=True))
        deps = [d for d in deps if d != i]
        nodes.append(compute(0, i, 1, deps))
    return WorkloadGraph(1, (), {0: tuple(nodes)})


@given(random_rank_graph())
def test_validate_agrees_with_kahn_oracle(g):
    edges = [(d, n.id) for n in g.rank_nodes(0) for d in n.deps]
    cyclic = kahn_unvisited([n.id for n in g.rank_nodes(0)], edges)
    out = validate(g)
    assert bool(out) == bool(cyclic)
    if not out:
        assert is_topological(topological_order(g, 0), {n.id: n.deps for n in g.rank_nodes(0)})


@given(st.integers(0, 10_000), st.integers(1, 64))
def test_balanced_split(total, parts):
    sizes = balanced_split(total, parts)
    assert sum(sizes) == total and max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
