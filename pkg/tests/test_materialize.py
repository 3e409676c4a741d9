import itertools
from dataclasses import dataclass, field

import pytest

from eventtensor.durations import constant, table, uniform
from eventtensor.materialize import (
    InstantiationError,
    RoutingRealization,
    check_trace,
    critical_path,
    instantiate,
    list_schedule,
    task_group,
    to_dot,
)
from eventtensor.workloads import (
    MoEParams,
    all_gather_gemm,
    gemm_reduce_scatter,
    moe_layer,
    random_dag,
    routing_from_topk,
    splitk_rowsum,
    symbolic_pipeline,
)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_splitk_structure(n):
    m = instantiate(splitk_rowsum(), {"n": n})
    partial = m.tasks_of_call(0)
    final = m.tasks_of_call(1)
    assert len(partial) == 4 * n and len(final) == n
    assert m.event_counts("E") == [4] * n
    # partial (i, j) notifies E[i]; final i waits E[i]
    for t in partial:
        assert [m.events[e].flat for e in m.task_out[t.id]] == [t.coord[0]]
    for t in final:
        assert [m.events[e].flat for e in m.task_in[t.id]] == [t.coord[0]]


def test_numbering_is_program_order_row_major():
    m = instantiate(splitk_rowsum(), {"n": 2})
    assert [t.coord for t in m.tasks[:8]] == list(itertools.product(range(2), range(4)))
    assert [t.id for t in m.tasks] == list(range(10))


def test_constraints_and_missing_symbols():
    g = gemm_reduce_scatter("m", fan_in=2)
    with pytest.raises(InstantiationError, match="constraint"):
        instantiate(g, {"m": 3})
    with pytest.raises(InstantiationError, match="unbound"):
        instantiate(g, {})
    assert len(instantiate(g, {"m": 4}).tasks) == 6


def test_data_dependence_requires_realization():
    g, _ = moe_layer(MoEParams(tokens=2, experts=2, top_k=2, tile_size=4))
    with pytest.raises(InstantiationError, match="realization"):
        instantiate(g, {})


def test_moe_hand_example():
    # 2 tokens, both routed to experts 0 and 1; tile size 4 -> one tile each
    g, _ = moe_layer(MoEParams(tokens=2, experts=2, top_k=2, tile_size=4))
    r = routing_from_topk([[0, 1], [0, 1]], 2, 4)
    assert r["exp_indptr"] == (0, 1, 2)
    m = instantiate(g, {}, r)
    assert m.event_counts("expert") == [2, 2]
    gemm = m.tasks_of_call(2)
    assert [t.group for t in gemm] == [0, 1]
    # grouping task (token, k) notifies expert topk[token, k]
    grp = m.tasks_of_call(1)
    assert [m.events[m.task_out[t.id][0]].flat for t in grp] == [0, 1, 0, 1]


def test_moe_inconsistent_realizations():
    g, _ = moe_layer(MoEParams(tokens=2, experts=2, top_k=2, tile_size=4))
    with pytest.raises(InstantiationError):
        instantiate(g, {}, RoutingRealization({"topk": [0, 1, 0], "exp_indptr": [0, 1, 2]}))
    with pytest.raises(InstantiationError):
        instantiate(g, {}, RoutingRealization({"topk": [0, 1, 0, 5], "exp_indptr": [0, 1, 2]}))
    with pytest.raises(InstantiationError):
        instantiate(g, {}, RoutingRealization({"topk": [0, 1, 0, 1], "exp_indptr": [0, 2, 1]}))
    with pytest.raises(InstantiationError):
        instantiate(g, {}, RoutingRealization({"topk": [0, 1, 0, 1], "exp_indptr": [0, 1]}))


def test_all_gather_counts():
    m = instantiate(all_gather_gemm(4, 2), {})
    assert m.event_counts("arrival") == [1, 1, 1, 1]
    assert m.event_counts("ring") == [0, 1, 1, 1, 1]


def test_task_group():
    assert task_group([0, 2, 2, 5], 0) == 0
    assert task_group([0, 2, 2, 5], 2) == 2
    assert task_group([0, 2, 2, 5], 4) == 2
    with pytest.raises(InstantiationError):
        task_group([0, 2], 2)


def test_random_durations_reproducible():
    g = gemm_reduce_scatter(mm=uniform(1, 100), rs=uniform(1, 100))
    a = [t.duration for t in instantiate(g, {"b": 4}, seed=7).tasks]
    b = [t.duration for t in instantiate(g, {"b": 4}, seed=7).tasks]
    c = [t.duration for t in instantiate(g, {"b": 4}, seed=8).tasks]
    assert a == b and a != c
    assert all(1 <= d <= 100 for d in a)


# --- oracles --------------------------------------------------------------

def test_critical_path_and_list_schedule_splitk():
    m = instantiate(splitk_rowsum(), {"n": 1})
    assert critical_path(m) == 2
    assert list_schedule(m, 2) == 3
    assert list_schedule(m, 4) == 2
    assert list_schedule(m, 1) == 5


def test_list_schedule_fanin2_rs():
    m = instantiate(gemm_reduce_scatter(mm=table([4, 6]), rs=constant(5)), {"b": 1})
    assert critical_path(m) == 11
    assert list_schedule(m, 2) == 11
    assert list_schedule(m, 1) == 15


def test_list_schedule_dma():
    # copies serialize on the DMA channel: 4 x 3, the last chunk's gemm adds 2
    m = instantiate(all_gather_gemm(4, 2), {})
    assert critical_path(m) == 14
    assert list_schedule(m, 2) == 14


def test_list_schedule_bounds_on_random_dags():
    for seed in range(30):
        m = instantiate(random_dag(7, 10, seed), {}, seed=seed)
        cp = critical_path(m)
        work = sum(t.duration for t in m.tasks)
        for sms in (1, 2, 3):
            ls = list_schedule(m, sms)
            assert cp <= ls <= work
            assert ls >= -(-work // sms)
        assert list_schedule(m, 1) == work


@dataclass
class Rec:
    call: int
    func: str
    coord: tuple
    resource: str
    start: int
    end: int
    noop: bool = False

    @property
    def exec_interval(self):
        return (self.start, self.end)


@dataclass
class FakeTrace:
    records: list = field(default_factory=list)


def test_check_trace_detects_violations():
    m = instantiate(gemm_reduce_scatter(mm=table([4, 6]), rs=constant(5)), {"b": 1})
    good = FakeTrace([Rec(0, "MM", (0,), "sm0", 0, 4), Rec(0, "MM", (1,), "sm1", 0, 6), Rec(1, "RS", (0,), "sm0", 6, 11)])
    assert check_trace(good, m) == []
    early = FakeTrace([Rec(0, "MM", (0,), "sm0", 0, 4), Rec(0, "MM", (1,), "sm1", 0, 6), Rec(1, "RS", (0,), "sm0", 5, 10)])
    assert any("before producer" in v for v in check_trace(early, m))
    overlap = FakeTrace([Rec(0, "MM", (0,), "sm0", 0, 4), Rec(0, "MM", (1,), "sm0", 2, 8), Rec(1, "RS", (0,), "sm1", 8, 13)])
    assert any("overlaps" in v for v in check_trace(overlap, m))
    missing = FakeTrace(good.records[:2])
    assert any("never executed" in v for v in check_trace(missing, m))
    dup = FakeTrace(good.records + [Rec(1, "RS", (0,), "sm1", 11, 16)])
    assert any("more than once" in v for v in check_trace(dup, m))
    unknown = FakeTrace(good.records + [Rec(1, "RS", (5,), "sm1", 11, 16)])
    assert any("unknown" in v for v in check_trace(unknown, m))
    noop = FakeTrace(good.records + [Rec(1, "RS", (5,), "sm1", 0, 0, noop=True)])
    assert check_trace(noop, m) == []


def test_to_dot():
    dot = to_dot(instantiate(splitk_rowsum(), {"n": 1}))
    assert dot.startswith("digraph")
    assert dot.count("->") == 5
    assert 'E[0]\\n4' in dot


def test_pipeline_batches():
    g = symbolic_pipeline(2)
    assert len(instantiate(g, {"B": 1}).tasks) == 2
    assert len(instantiate(g, {"B": 2}).tasks) == 4
