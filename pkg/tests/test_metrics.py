import csv
import json

import pytest

from eventtensor.durations import constant, table, uniform
from eventtensor.metrics import MetricsError, compare, compute_metrics, export_trace
from eventtensor.sched_dynamic import lower_dynamic
from eventtensor.sched_static import lower_static, worst_case_rewrite
from eventtensor.simcore import Phase, SimConfig, TaskRecord, Trace, simulate, simulate_barrier_baseline
from eventtensor.workloads import MoEParams, gemm_reduce_scatter, moe_layer, random_dag


def fanin2_rs_trace():
    g = gemm_reduce_scatter(mm=table([4, 6]), rs=constant(5))
    return simulate(lower_static(g, [{"b": 1}], 2), {"b": 1}, None, SimConfig(num_sms=2))


def four_mm_rs_trace():
    g = gemm_reduce_scatter(mm=table([2, 6, 2, 3]), rs=constant(2))
    return simulate(lower_dynamic(g), {"b": 2}, None, SimConfig(num_sms=2))


def empty_trace():
    return Trace("static", ["sm0", "dma"], [], [], 0, {})


def test_single_task_busy():
    g = random_dag(1, 0, 0, max_width=1, duration=constant(10))
    m = compute_metrics(simulate(lower_static(g, [{}], 1), {}, None, SimConfig(num_sms=1)))
    assert m.makespan == 10
    assert m.resources["sm0"] == {"busy": 1.0, "spin": 0.0, "idle": 0.0}
    assert m.resources["dma"]["idle"] == 1.0


def test_fanin2_rs_spin_wait():
    m = compute_metrics(fanin2_rs_trace())
    assert m.makespan == 11
    assert m.resources["sm0"]["spin"] == pytest.approx(2 / 11)
    assert m.resources["sm0"]["busy"] == pytest.approx(9 / 11)
    assert m.resources["sm1"] == pytest.approx({"busy": 6 / 11, "spin": 0.0, "idle": 5 / 11})
    assert m.wait_blocks == 1
    assert m.notifies == 2
    assert m.stage_span == {"0:MM": (0, 6), "1:RS": (6, 11)}


def test_empty_trace():
    m = compute_metrics(empty_trace())
    assert m.makespan == 0
    assert all(f == {"busy": 0.0, "spin": 0.0, "idle": 1.0} for f in m.resources.values())


def test_fractions_sum_to_one():
    for seed in range(20):
        g = gemm_reduce_scatter(mm=uniform(1, 9), rs=uniform(1, 9))
        tr = simulate(lower_dynamic(g), {"b": 4}, None, SimConfig(num_sms=3, seed=seed, pop_cost=1, push_cost_per_task=1))
        m = compute_metrics(tr)
        assert m.makespan == tr.makespan
        for f in m.resources.values():
            assert abs(f["busy"] + f["spin"] + f["idle"] - 1.0) <= 1e-9
            assert min(f.values()) >= -1e-9
        assert m.pops >= 12 and m.pushes == 12


def test_overlapping_exec_is_rejected():
    recs = [TaskRecord(0, "a", (0,), "sm0", phases=[Phase("exec", 0, 5)]),
            TaskRecord(0, "a", (1,), "sm0", phases=[Phase("exec", 3, 8)])]
    with pytest.raises(MetricsError):
        compute_metrics(Trace("static", ["sm0"], recs, [], 8, {}))


def test_chrome_export_round_trip(tmp_path):
    tr = fanin2_rs_trace()
    path = export_trace(tr, "chrome-trace", tmp_path / "t.json")
    events = json.loads(path.read_text())
    assert isinstance(events, list)
    spans = [e for e in events if e["ph"] == "X"]
    assert len(spans) == sum(len(r.phases) for r in tr.records)
    names = {e["tid"]: e["args"]["name"] for e in events if e["ph"] == "M"}
    assert set(names.values()) == {"sm0", "sm1", "dma"}
    rs = [e for e in spans if e["args"]["call"] == 1]
    assert {(e["cat"], e["ts"], e["dur"]) for e in rs} == {("wait", 4, 2), ("exec", 6, 5)}


def test_four_mm_rs_pops_are_instant_markers(tmp_path):
    events = json.loads(export_trace(four_mm_rs_trace(), "chrome", tmp_path / "t.json").read_text())
    pops = [e for e in events if e["ph"] == "i" and e["name"] == "pop"]
    assert len(pops) == 6
    assert any(e["ts"] == 6 and e["args"] == {"call": 1, "coord": [0]} for e in pops)


def test_csv_export(tmp_path):
    tr = fanin2_rs_trace()
    path = export_trace(tr, "csv", tmp_path / "t.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["task_id", "call", "coord", "resource", "phase", "start", "end"]
    assert len(rows) == sum(len(r.phases) for r in tr.records)
    assert {"task_id": "2", "call": "1", "coord": "0", "resource": "sm0", "phase": "exec", "start": "6", "end": "11"} in rows


def test_empty_export(tmp_path):
    assert json.loads(export_trace(empty_trace(), "chrome", tmp_path / "e.json").read_text()) == []
    rows = list(csv.reader((export_trace(empty_trace(), "csv", tmp_path / "e.csv")).open()))
    assert len(rows) == 1
    with pytest.raises(ValueError):
        export_trace(empty_trace(), "svg", tmp_path / "e.svg")
    with pytest.raises(OSError):
        export_trace(fanin2_rs_trace(), "csv", tmp_path / "missing" / "x.csv")


def test_compare_basics():
    m = compute_metrics(fanin2_rs_trace())
    rep = compare([("a", m), ("b", m)], baseline="a")
    assert rep.ratio("b") == 1.0
    assert "baseline" in rep.table
    with pytest.raises(ValueError, match="duplicate"):
        compare([("a", m), ("a", m)], "a")
    with pytest.raises(ValueError, match="baseline"):
        compare([("a", m), ("b", m)], "c")
    with pytest.raises(ValueError):
        compare([("a", m)], "a")


def test_static_beats_barrier_with_wave_quantization():
    # 10 MM (4) + 5 RS (2) on 4 SMs. Barrier: 3 MM waves + 2 RS waves = 12 + 4.
    # Fused: RS0/RS1 fill SM2/SM3 at t=8, RS2-4 run [12, 14].
    g = gemm_reduce_scatter()
    cfg = SimConfig(num_sms=4)
    fused = compute_metrics(simulate(lower_static(g, [{"b": 5}], 4), {"b": 5}, None, cfg))
    base = compute_metrics(simulate_barrier_baseline(g, {"b": 5}, None, cfg))
    assert (fused.makespan, base.makespan) == (14, 16)
    rep = compare([("static", fused), ("barrier", base)], "barrier")
    assert rep.ratio("static") == pytest.approx(16 / 14) and rep.ratio("static") > 1


def test_compare_scale_invariant():
    def runs(scale):
        g = gemm_reduce_scatter(mm=constant(4 * scale), rs=constant(2 * scale))
        cfg = SimConfig(num_sms=4)
        s = compute_metrics(simulate(lower_static(g, [{"b": 5}], 4), {"b": 5}, None, cfg))
        d = compute_metrics(simulate(lower_dynamic(g), {"b": 5}, None, cfg))
        b = compute_metrics(simulate_barrier_baseline(g, {"b": 5}, None, cfg))
        return compare([("static", s), ("dynamic", d), ("barrier", b)], "barrier")
    one, three = runs(1), runs(3)
    for label in ("static", "dynamic", "barrier"):
        assert one.ratio(label) == pytest.approx(three.ratio(label))


def test_dynamic_ratio_at_least_static_on_hot_expert_moe():
    p = MoEParams(tokens=64, experts=8, top_k=2, tile_size=8, hot_expert=0, hot_prob=0.9,
                  gemm=uniform(2, 8), group=uniform(1, 3))
    g, real = moe_layer(p)
    for seed in range(3):
        r = real(seed=seed)
        cfg = SimConfig(num_sms=8, seed=seed)
        s = compute_metrics(simulate(lower_static(worst_case_rewrite(g), [{}], 8), {}, r, cfg))
        d = compute_metrics(simulate(lower_dynamic(g), {}, r, cfg))
        b = compute_metrics(simulate_barrier_baseline(g, {}, r, cfg))
        rep = compare([("static", s), ("dynamic", d), ("barrier", b)], "barrier")
        assert rep.ratio("dynamic") >= rep.ratio("static")
