"""Trace metrics, export and run comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .simcore import Trace

__all__ = ["MetricsError", "Metrics", "compute_metrics", "export_trace", "CompareReport", "compare"]


class MetricsError(ValueError):
    pass


def _union(intervals) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _length(intervals) -> int:
    return sum(e - s for s, e in intervals)


def _subtract(a, b) -> list[tuple[int, int]]:
    """``a \\ b`` for sorted disjoint interval lists."""
    out = []
    j = 0
    for s, e in a:
        cur = s
        while j < len(b) and b[j][1] <= cur:
            j += 1
        k = j
        while k < len(b) and b[k][0] < e:
            if b[k][0] > cur:
                out.append((cur, b[k][0]))
            cur = max(cur, b[k][1])
            k += 1
        if cur < e:
            out.append((cur, e))
    return out


@dataclass
class Metrics:
    makespan: int
    # resource -> {"busy": f, "spin": f, "idle": f}
    resources: dict[str, dict[str, float]] = field(default_factory=dict)
    notifies: int = 0
    wait_blocks: int = 0
    pushes: int = 0
    pops: int = 0
    empty_polls: int = 0
    # "k:func" -> (first exec start, last exec end)
    stage_span: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def compute_metrics(trace: Trace) -> Metrics:
    """Aggregate a trace. Busy time is any non-wait phase; spin-wait is
    time blocked in WAIT that is not also busy (a prefetch overlapping a
    wait counts as busy); idle is the rest of ``[0, makespan]``."""
    per_res: dict[str, list] = {r: [] for r in trace.resources}
    execs: dict[str, list] = {r: [] for r in trace.resources}
    waits: dict[str, list] = {r: [] for r in trace.resources}
    spans: dict[str, list[int]] = {}
    wait_blocks = 0
    for rec in trace.records:
        per_res.setdefault(rec.resource, [])
        execs.setdefault(rec.resource, [])
        waits.setdefault(rec.resource, [])
        for p in rec.phases:
            if p.kind == "wait":
                waits[rec.resource].append((p.start, p.end))
                wait_blocks += 1
            else:
                per_res[rec.resource].append((p.start, p.end))
            if p.kind == "exec":
                execs[rec.resource].append((p.start, p.end))
                key = f"{rec.call}:{rec.func}"
                span = spans.setdefault(key, [p.start, p.end])
                span[0] = min(span[0], p.start)
                span[1] = max(span[1], p.end)
    for res, xs in execs.items():
        xs.sort()
        for (s0, e0), (s1, e1) in zip(xs, xs[1:]):
            if s1 < e0:
                raise MetricsError(f"overlapping exec intervals on {res}: [{s0}, {e0}) and [{s1}, {e1})")

    makespan = trace.makespan
    resources = {}
    for res in per_res:
        busy = _union(per_res[res])
        spin = _subtract(_union(waits[res]), busy)
        if makespan == 0:
            resources[res] = {"busy": 0.0, "spin": 0.0, "idle": 1.0}
            continue
        b = _length(busy) / makespan
        s = _length(spin) / makespan
        resources[res] = {"busy": b, "spin": s, "idle": 1.0 - b - s}

    counts = {"notify": 0, "push": 0, "pop": 0, "empty_poll": 0}
    for ev in trace.sched_events:
        if ev.kind in counts:
            counts[ev.kind] += 1
    return Metrics(
        makespan=makespan,
        resources=resources,
        notifies=counts["notify"],
        wait_blocks=wait_blocks,
        pushes=counts["push"],
        pops=counts["pop"],
        empty_polls=counts["empty_poll"],
        stage_span={k: (v[0], v[1]) for k, v in sorted(spans.items(), key=lambda kv: int(kv[0].split(":")[0]))},
    )


def _chrome_events(trace: Trace) -> list[dict]:
    tid = {r: i for i, r in enumerate(trace.resources)}
    events: list[dict] = []
    for rec in trace.records:
        tid.setdefault(rec.resource, len(tid))
    if not trace.records and not trace.sched_events:
        return events
    for res, i in tid.items():
        events.append({"name": "thread_name", "ph": "M", "pid": 0, "tid": i, "args": {"name": res}})
    for n, rec in enumerate(trace.records):
        for p in rec.phases:
            events.append({
                "name": f"{rec.func}{list(rec.coord)}",
                "cat": p.kind,
                "ph": "X",
                "ts": p.start,
                "dur": p.end - p.start,
                "pid": 0,
                "tid": tid[rec.resource],
                "args": {"task_id": n, "call": rec.call, "coord": list(rec.coord), "phase": p.kind, "noop": rec.noop},
            })
    for ev in trace.sched_events:
        if ev.kind not in ("pop", "push"):
            continue
        e = {"name": ev.kind, "cat": "sched", "ph": "i", "s": "t" if ev.resource else "g", "ts": ev.time, "pid": 0}
        if ev.resource:
            e["tid"] = tid[ev.resource]
        if ev.task is not None:
            e["args"] = {"call": ev.task[0], "coord": list(ev.task[1])}
        events.append(e)
    return events


def export_trace(trace: Trace, fmt: str, path) -> Path:
    """Write ``trace`` as a chrome trace-event JSON array or as CSV."""
    path = Path(path)
    if fmt in ("chrome", "chrome-trace"):
        text = json.dumps(_chrome_events(trace))
        path.write_text(text + "\n")
    elif fmt == "csv":
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "call", "coord", "resource", "phase", "start", "end"])
            for n, rec in enumerate(trace.records):
                coord = "x".join(map(str, rec.coord))
                for p in rec.phases:
                    w.writerow([n, rec.call, coord, rec.resource, p.kind, p.start, p.end])
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return path


@dataclass
class CompareReport:
    baseline: str
    # (label, makespan, baseline_makespan / makespan)
    rows: list[tuple[str, int, float]]

    def ratio(self, label: str) -> float:
        for lab, _, r in self.rows:
            if lab == label:
                return r
        raise KeyError(label)

    def to_dict(self):
        return {"baseline": self.baseline, "rows": [list(r) for r in self.rows]}

    @property
    def table(self) -> str:
        w = max([len("run")] + [len(r[0]) for r in self.rows])
        lines = [f"{'run':<{w}}  {'makespan':>10}  {'speedup':>8}", f"{'-' * w}  {'-' * 10}  {'-' * 8}"]
        for label, ms, ratio in self.rows:
            mark = " (baseline)" if label == self.baseline else ""
            lines.append(f"{label:<{w}}  {ms:>10}  {ratio:>7.3f}x{mark}")
        return "\n".join(lines)


def compare(runs: Sequence[tuple[str, Metrics]], baseline: str) -> CompareReport:
    """Makespan ratios ``baseline / variant`` (higher is better)."""
    if len(runs) < 2:
        raise ValueError("compare needs at least two runs")
    labels = [lab for lab, _ in runs]
    dup = {lab for lab in labels if labels.count(lab) > 1}
    if dup:
        raise ValueError(f"duplicate run labels {sorted(dup)}")
    if baseline not in labels:
        raise ValueError(f"baseline {baseline!r} not among runs {labels}")
    base = dict(runs)[baseline].makespan
    rows = []
    for label, m in runs:
        if m.makespan == 0:
            ratio = 1.0 if base == 0 else float("inf")
        else:
            ratio = base / m.makespan
        rows.append((label, m.makespan, ratio))
    return CompareReport(baseline, rows)
