"""Instantiate a symbolic graph into a concrete task graph, plus the
reference oracles that work on it: critical path, greedy list schedule and
trace checking.

The materialized graph is what a traditional task-graph runtime would keep
in memory. Here it is only used for verification and for the oracles; the
lowered kernels never hold it.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Mapping, Sequence

from .ir import (
    DataDependentInit,
    DataDependentNotify,
    GraphFunction,
    RangeTrigger,
    StaticMap,
    coord_symbols,
    validate_graph,
)
from .symshape import SymShapeError, compile_expr, eval_expr

__all__ = [
    "InstantiationError",
    "RoutingRealization",
    "Task",
    "EventElement",
    "MaterializedTaskGraph",
    "instantiate",
    "eval_shape",
    "flat_index",
    "task_group",
    "critical_path",
    "list_schedule",
    "check_trace",
    "to_dot",
]


class InstantiationError(ValueError):
    """The graph cannot be instantiated for the given binding/realization."""


@dataclass(frozen=True)
class RoutingRealization:
    """Concrete contents of runtime tensors, flattened row-major."""

    tensors: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tensors", {k: tuple(int(x) for x in v) for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> tuple[int, ...]:
        try:
            return self.tensors[name]
        except KeyError:
            raise InstantiationError(f"realization has no runtime tensor {name!r}") from None

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.tensors.items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[int]]) -> "RoutingRealization":
        return cls(dict(d))


@dataclass(frozen=True)
class Task:
    id: int
    call: int
    func: str
    coord: tuple[int, ...]
    resource: str
    duration: int
    prefetch: int
    group: int | None = None

    @property
    def key(self) -> tuple[int, tuple[int, ...]]:
        return (self.call, self.coord)


@dataclass(frozen=True)
class EventElement:
    id: int
    tensor: str
    flat: int
    count: int
    data_dependent: bool = False


@dataclass
class MaterializedTaskGraph:
    tasks: list[Task]
    events: list[EventElement]
    producers: list[list[int]]  # event id -> task ids
    consumers: list[list[int]]  # event id -> task ids
    task_in: list[list[int]]  # task id -> event ids
    task_out: list[list[int]]  # task id -> event ids
    binding: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.by_key = {t.key: t.id for t in self.tasks}
        self.event_ids = {(e.tensor, e.flat): e.id for e in self.events}

    def task(self, call: int, coord) -> Task:
        return self.tasks[self.by_key[(call, tuple(coord))]]

    def event_counts(self, tensor: str) -> list[int]:
        return [e.count for e in self.events if e.tensor == tensor]

    def tasks_of_call(self, call: int) -> list[Task]:
        return [t for t in self.tasks if t.call == call]


def eval_shape(shape, binding) -> tuple[int, ...]:
    try:
        return tuple(eval_expr(e, binding) for e in shape)
    except SymShapeError as e:
        raise InstantiationError(str(e)) from None


def flat_index(coord: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat index; raises if ``coord`` is out of bounds."""
    if len(coord) != len(shape):
        raise InstantiationError(f"index rank {len(coord)} != shape rank {len(shape)}")
    flat = 0
    for c, d in zip(coord, shape):
        if not 0 <= c < d:
            raise InstantiationError(f"index {tuple(coord)} out of bounds for shape {tuple(shape)}")
        flat = flat * d + c
    return flat


def _size(shape) -> int:
    return math.prod(shape)


def task_group(indptr: Sequence[int], t: int) -> int:
    """The group ``i`` with ``indptr[i] <= t < indptr[i + 1]``."""
    if not 0 <= t < indptr[-1]:
        raise InstantiationError(f"task {t} outside indptr range [0, {indptr[-1]})")
    return bisect.bisect_right(indptr, t) - 1


def _check_realization(g: GraphFunction, binding, r: RoutingRealization) -> None:
    for rt in g.runtime_tensors:
        vals = r[rt.name]
        shape = eval_shape(rt.shape, binding)
        if len(vals) != _size(shape):
            raise InstantiationError(f"runtime tensor {rt.name!r} has {len(vals)} values, shape {shape}")
        if rt.role == "indptr":
            if not vals or vals[0] != 0:
                raise InstantiationError(f"indptr {rt.name!r} must start at 0")
            if any(b < a for a, b in zip(vals, vals[1:])):
                raise InstantiationError(f"indptr {rt.name!r} is not non-decreasing")
        elif any(v < 0 for v in vals):
            raise InstantiationError(f"runtime tensor {rt.name!r} has negative entries")


def instantiate(
    g: GraphFunction,
    binding: Mapping[str, int],
    realization: RoutingRealization | None = None,
    seed: int = 0,
    check: bool = True,
) -> MaterializedTaskGraph:
    """Enumerate tasks, event elements and edges for one concrete binding.

    Tasks are numbered in program order, row-major within each call. Every
    producer must precede its consumers in that numbering; intra-call edges
    that point backwards are rejected.
    """
    if check:
        diags = validate_graph(g)
        if diags:
            raise InstantiationError("invalid graph: " + "; ".join(map(str, diags)))
    binding = {k: int(v) for k, v in binding.items()}
    missing = set(g.symbols) - set(binding)
    if missing:
        raise InstantiationError(f"unbound shape symbols {sorted(missing)}")
    for c in g.constraints:
        try:
            v = eval_expr(c, binding)
        except SymShapeError as e:
            raise InstantiationError(str(e)) from None
        if v != 0:
            raise InstantiationError(f"constraint {c} == 0 violated (got {v}) for binding {binding}")
    if g.has_data_dependence():
        if realization is None:
            raise InstantiationError("graph has data-dependent edges; a routing realization is required")
    if realization is not None and g.runtime_tensors:
        _check_realization(g, binding, realization)

    # event elements
    events: list[EventElement] = []
    ev_shape: dict[str, tuple[int, ...]] = {}
    ev_base: dict[str, int] = {}
    for decl in g.event_tensors:
        shape = eval_shape(decl.shape, binding)
        ev_shape[decl.name] = shape
        ev_base[decl.name] = len(events)
        for flat in range(_size(shape)):
            events.append(EventElement(len(events), decl.name, flat, 0, decl.data_dependent))
    producers: list[list[int]] = [[] for _ in events]
    consumers: list[list[int]] = [[] for _ in events]

    tasks: list[Task] = []
    task_in: list[list[int]] = []
    task_out: list[list[int]] = []
    rt_shape = {rt.name: eval_shape(rt.shape, binding) for rt in g.runtime_tensors}

    for k, call in enumerate(g.calls):
        decl = g.func(call.func)
        grid = eval_shape(g.launch_grid(call), binding)
        extent = None
        if call.extent is not None and realization is not None and call.extent in realization.tensors:
            indptr = realization[call.extent]
            extent = indptr[-1]
            if extent > grid[0]:
                raise InstantiationError(
                    f"call {k} ({call.func}): indptr total {extent} exceeds launch bound {grid[0]}")
            grid = (extent,)
        csyms = coord_symbols(len(grid))
        static_in = [(e, [compile_expr(x) for x in e.map.index]) for e in call.in_edges if isinstance(e.map, StaticMap)]
        static_out = [(e, [compile_expr(x) for x in e.map.index]) for e in call.out_edges if isinstance(e.map, StaticMap)]
        env = dict(binding)
        for flat_t, coord in enumerate(itertools.product(*(range(d) for d in grid))):
            tid = len(tasks)
            env.update(zip(csyms, coord))
            group = None
            ins: list[int] = []
            outs: list[int] = []

            def resolve(fns, ev):
                try:
                    idx = [f(env) for f in fns]
                except SymShapeError as e:
                    raise InstantiationError(f"call {k} ({call.func}) task {coord}: {e}") from None
                try:
                    return ev_base[ev] + flat_index(idx, ev_shape[ev])
                except InstantiationError as e:
                    raise InstantiationError(f"call {k} ({call.func}) task {coord} edge {ev!r}: {e}") from None

            for e, fns in static_in:
                ins.append(resolve(fns, e.event))
            for e in call.in_edges:
                if isinstance(e.map, RangeTrigger):
                    i = task_group(realization[e.map.indptr], coord[0])
                    if i >= _size(ev_shape[e.event]):
                        raise InstantiationError(f"indptr {e.map.indptr!r} has more groups than event {e.event!r}")
                    group = i
                    ins.append(ev_base[e.event] + i)
            for e, fns in static_out:
                outs.append(resolve(fns, e.event))
            for e in call.out_edges:
                if isinstance(e.map, DataDependentNotify):
                    routing = realization[e.map.routing]
                    if e.map.index is not None:
                        try:
                            ridx = [eval_expr(x, env) for x in e.map.index]
                        except SymShapeError as ex:
                            raise InstantiationError(str(ex)) from None
                    else:
                        ridx = list(coord)
                    v = routing[flat_index(ridx, rt_shape[e.map.routing])]
                    if not 0 <= v < _size(ev_shape[e.event]):
                        raise InstantiationError(
                            f"routing value {v} outside [0, {_size(ev_shape[e.event])}) for event {e.event!r}")
                    group = v
                    outs.append(ev_base[e.event] + v)
            # durations key only on tile groups (range trigger / extent), which a
            # worst-case-rewritten static kernel can still recover at run time
            dgroup = group if any(isinstance(e.map, RangeTrigger) for e in call.in_edges) else None
            if extent is not None:
                dgroup = task_group(realization[call.extent], coord[0])
                group = dgroup if group is None else group
            ins = list(dict.fromkeys(ins))
            outs = list(dict.fromkeys(outs))
            dur = decl.duration.sample(seed, k, flat_t, dgroup)
            pf = decl.prefetch.sample(seed, k, flat_t, dgroup) if decl.prefetch is not None else 0
            tasks.append(Task(tid, k, call.func, tuple(coord), decl.resource, dur, pf, group))
            task_in.append(ins)
            task_out.append(outs)
            for ev in outs:
                producers[ev].append(tid)

    # consumer edges after all producers are known, so order checks see everything
    for t in tasks:
        for ev in task_in[t.id]:
            consumers[ev].append(t.id)
            if producers[ev] and max(producers[ev]) >= t.id:
                raise InstantiationError(
                    f"task {t.func}{t.coord} consumes {events[ev].tensor}[{events[ev].flat}] "
                    f"produced by a later task; program order is not topological")

    # initial counts
    for decl in g.event_tensors:
        base = ev_base[decl.name]
        n = _size(ev_shape[decl.name])
        if isinstance(decl.init, DataDependentInit):
            src = g.runtime(decl.init.counts)
            vals = realization[src.name]
            if src.role == "routing":
                counts = [0] * n
                for v in vals:
                    if not 0 <= v < n:
                        raise InstantiationError(f"routing value {v} outside [0, {n})")
                    counts[v] += 1
            else:
                if len(vals) != n:
                    raise InstantiationError(f"counts tensor {src.name!r} has {len(vals)} values, event has {n}")
                counts = list(vals)
            for i in range(n):
                if counts[i] != len(producers[base + i]):
                    raise InstantiationError(
                        f"realization inconsistent: {decl.name}[{i}] initialized to {counts[i]} "
                        f"but has {len(producers[base + i])} producers")
        else:
            counts = [len(producers[base + i]) for i in range(n)]
        for i in range(n):
            e = events[base + i]
            events[base + i] = EventElement(e.id, e.tensor, e.flat, counts[i], e.data_dependent)

    # indptr totals must match the grids they trigger
    if realization is not None:
        for k, call in enumerate(g.calls):
            for e in call.in_edges:
                if isinstance(e.map, RangeTrigger):
                    ntasks = sum(1 for t in tasks if t.call == k)
                    last = realization[e.map.indptr][-1]
                    if last != ntasks:
                        raise InstantiationError(
                            f"indptr {e.map.indptr!r} ends at {last} but call {k} has {ntasks} tasks")
                    groups = _size(ev_shape[e.event])
                    if len(realization[e.map.indptr]) != groups + 1:
                        raise InstantiationError(
                            f"indptr {e.map.indptr!r} has length {len(realization[e.map.indptr])}, expected {groups + 1}")

    return MaterializedTaskGraph(tasks, events, producers, consumers, task_in, task_out, binding)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def _task_preds(m: MaterializedTaskGraph) -> dict[int, set[int]]:
    return {t.id: {p for ev in m.task_in[t.id] for p in m.producers[ev]} for t in m.tasks}


def critical_path(m: MaterializedTaskGraph) -> int:
    """Longest chain of task durations through producer -> event -> consumer."""
    preds = _task_preds(m)
    try:
        order = list(TopologicalSorter(preds).static_order())
    except CycleError as e:
        raise InstantiationError(f"task graph has a cycle: {e.args[1]}") from None
    finish: dict[int, int] = {}
    for tid in order:
        start = max((finish[p] for p in preds[tid]), default=0)
        finish[tid] = start + m.tasks[tid].duration
    return max(finish.values(), default=0)


def list_schedule(m: MaterializedTaskGraph, num_sms: int) -> int:
    """Makespan of greedy earliest-ready list scheduling.

    At every completion instant, ready tasks (ascending id) are assigned to
    idle resources (ascending index). A task occupies its resource for
    ``prefetch + duration``. DMA tasks use the single DMA channel.
    """
    if num_sms < 1:
        raise ValueError("num_sms must be >= 1")
    remaining = [len(p) for p in m.producers]
    pending = [sum(1 for ev in m.task_in[t.id] if remaining[ev] > 0) for t in m.tasks]
    ready = [t.id for t in m.tasks if pending[t.id] == 0]
    heapq.heapify(ready)
    idle_sm = list(range(num_sms))
    dma_idle = True
    running: list[tuple[int, int, int]] = []  # (end, task, resource slot)
    now = 0
    done = 0
    while done < len(m.tasks):
        deferred = []
        while ready:
            tid = heapq.heappop(ready)
            t = m.tasks[tid]
            if t.resource == "DMA":
                if dma_idle:
                    dma_idle = False
                    heapq.heappush(running, (now + t.prefetch + t.duration, tid, -1))
                    continue
            elif idle_sm:
                sm = heapq.heappop(idle_sm)
                heapq.heappush(running, (now + t.prefetch + t.duration, tid, sm))
                continue
            deferred.append(tid)
        for tid in deferred:
            heapq.heappush(ready, tid)
        if not running:
            raise InstantiationError("list schedule stalled: unsatisfiable dependencies")
        now = running[0][0]
        while running and running[0][0] == now:
            _, tid, slot = heapq.heappop(running)
            done += 1
            if slot < 0:
                dma_idle = True
            else:
                heapq.heappush(idle_sm, slot)
            for ev in m.task_out[tid]:
                remaining[ev] -= 1
                if remaining[ev] == 0:
                    for c in m.consumers[ev]:
                        pending[c] -= 1
                        if pending[c] == 0:
                            heapq.heappush(ready, c)
    return now


def check_trace(trace, m: MaterializedTaskGraph) -> list[str]:
    """Check an execution trace against the task graph.

    Returns violations: tasks missing, duplicated or unknown; consumers
    starting before a producer of one of their events finished; two
    executions overlapping on one resource.
    """
    violations: list[str] = []
    seen: dict[tuple, object] = {}
    for rec in trace.records:
        if rec.noop:
            continue
        key = (rec.call, tuple(rec.coord))
        if key not in m.by_key:
            violations.append(f"unknown task {rec.func}{tuple(rec.coord)} executed")
            continue
        if key in seen:
            violations.append(f"task {rec.func}{tuple(rec.coord)} executed more than once")
            continue
        if rec.exec_interval is None:
            violations.append(f"task {rec.func}{tuple(rec.coord)} has no execution interval")
            continue
        seen[key] = rec
    for t in m.tasks:
        if t.key not in seen:
            violations.append(f"task {t.func}{t.coord} never executed")
    for t in m.tasks:
        rec = seen.get(t.key)
        if rec is None:
            continue
        start = rec.exec_interval[0]
        for ev in m.task_in[t.id]:
            for p in m.producers[ev]:
                prec = seen.get(m.tasks[p].key)
                if prec is None:
                    continue
                if prec.exec_interval[1] > start:
                    pt = m.tasks[p]
                    e = m.events[ev]
                    violations.append(
                        f"{t.func}{t.coord} starts at {start} before producer {pt.func}{pt.coord} "
                        f"of {e.tensor}[{e.flat}] finishes at {prec.exec_interval[1]}")
    by_res: dict[str, list[tuple[int, int, str]]] = {}
    for rec in seen.values():
        s, e = rec.exec_interval
        by_res.setdefault(rec.resource, []).append((s, e, f"{rec.func}{tuple(rec.coord)}"))
    for res, ivs in by_res.items():
        ivs.sort()
        for (s1, e1, n1), (s2, e2, n2) in zip(ivs, ivs[1:]):
            if s2 < e1 and s1 < e2:
                violations.append(f"{res}: {n1} [{s1},{e1}) overlaps {n2} [{s2},{e2})")
    return violations


def to_dot(m: MaterializedTaskGraph) -> str:
    """Graphviz text for a materialized graph (tasks as boxes, events as circles)."""
    lines = ["digraph tasks {", "  rankdir=LR;"]
    for t in m.tasks:
        coord = ",".join(map(str, t.coord))
        lines.append(f'  t{t.id} [shape=box, label="{t.func}({coord})\\nd={t.duration}"];')
    for e in m.events:
        if not m.producers[e.id] and not m.consumers[e.id]:
            continue
        lines.append(f'  e{e.id} [shape=circle, label="{e.tensor}[{e.flat}]\\n{e.count}"];')
    for e in m.events:
        for p in m.producers[e.id]:
            lines.append(f"  t{p} -> e{e.id};")
        for c in m.consumers[e.id]:
            lines.append(f"  e{e.id} -> t{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"
