"""Static scheduling: per-SM task queues built ahead of time.

Each sampled shape binding is instantiated, its tasks are dealt round-robin
(program order, then row-major coordinates) onto SM queues, and every task
gets an instruction sequence ``[PREFETCH?, WAIT..., EXEC, NOTIFY...]`` whose
operands are flat addresses into one integer counter array.

Unseen shapes run on the queues of the next larger sample with
out-of-bounds tasks masked to no-ops. Data-dependent edges must first be
collapsed onto a single barrier event with :func:`worst_case_rewrite`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .ir import (
    DerivedCount,
    EdgeSpec,
    EventTensorDecl,
    GraphFunction,
    StaticMap,
    graph_from_dict,
    graph_to_dict,
    validate_graph,
)
from .materialize import InstantiationError, eval_shape, instantiate
from .symshape import SymShapeError, const, eval_expr

__all__ = [
    "LoweringError",
    "QueuedTask",
    "StaticSample",
    "StaticMegakernel",
    "SelectedQueues",
    "lower_static",
    "select_queues",
    "worst_case_rewrite",
    "check_queue_topology",
]


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class QueuedTask:
    call: int
    coord: tuple[int, ...]
    instrs: tuple[tuple, ...]

    @property
    def key(self):
        return (self.call, self.coord)


@dataclass(frozen=True)
class StaticSample:
    binding: Mapping[str, int]
    queues: tuple[tuple[QueuedTask, ...], ...]
    dma_queue: tuple[QueuedTask, ...]
    # tensor name -> (offset, size) in the flat counter store
    layout: Mapping[str, tuple[int, int]]
    counters: tuple[int, ...]

    def all_tasks(self):
        for q in self.queues:
            yield from q
        yield from self.dma_queue


@dataclass(frozen=True)
class StaticMegakernel:
    graph: GraphFunction
    num_sms: int
    samples: tuple[StaticSample, ...]
    prefetch: bool = True
    mode: str = "static"

    def to_dict(self) -> dict[str, Any]:
        def q(tasks):
            return [{"call": t.call, "coord": list(t.coord), "instrs": [list(i) for i in t.instrs]} for t in tasks]

        return {
            "mode": "static",
            "num_sms": self.num_sms,
            "prefetch": self.prefetch,
            "graph": graph_to_dict(self.graph),
            "samples": [
                {
                    "binding": dict(s.binding),
                    "queues": [q(x) for x in s.queues],
                    "dma_queue": q(s.dma_queue),
                    "layout": {k: list(v) for k, v in s.layout.items()},
                    "counters": list(s.counters),
                }
                for s in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StaticMegakernel":
        def q(tasks):
            return tuple(QueuedTask(t["call"], tuple(t["coord"]), tuple(tuple(i) for i in t["instrs"])) for t in tasks)

        samples = tuple(
            StaticSample(
                dict(s["binding"]),
                tuple(q(x) for x in s["queues"]),
                q(s["dma_queue"]),
                {k: tuple(v) for k, v in s["layout"].items()},
                tuple(s["counters"]),
            )
            for s in d["samples"]
        )
        return cls(graph_from_dict(d["graph"]), d["num_sms"], samples, d.get("prefetch", True))


def _sample_key(g: GraphFunction, binding) -> tuple:
    order = ([g.size_symbol] if g.size_symbol else []) + [s for s in g.symbols if s != g.size_symbol]
    return tuple(binding[s] for s in order)


def lower_static(
    g: GraphFunction,
    samples: Sequence[Mapping[str, int]],
    num_sms: int,
    prefetch: bool = True,
) -> StaticMegakernel:
    """Build per-SM queues for each sampled binding.

    Tasks are dealt to SMs ``0..num_sms-1`` cyclically in program order;
    DMA-class tasks go to the single DMA queue in the same order.
    """
    if num_sms < 1:
        raise LoweringError("num_sms must be >= 1")
    if not samples:
        raise LoweringError("at least one sampled shape binding is required")
    diags = validate_graph(g)
    if diags:
        raise LoweringError("invalid graph: " + "; ".join(map(str, diags)))
    if g.has_data_dependence():
        raise LoweringError("unsampled data-dependent edge remaining; apply worst_case_rewrite first")

    built = []
    for binding in samples:
        binding = {k: int(v) for k, v in binding.items() if k in g.symbols}
        m = instantiate(g, binding, check=False)
        layout = {}
        for e in m.events:
            off, size = layout.get(e.tensor, (e.id, 0))
            layout[e.tensor] = (off, size + 1)
        queues: list[list[QueuedTask]] = [[] for _ in range(num_sms)]
        dma: list[QueuedTask] = []
        deal = 0
        for t in m.tasks:
            instrs: list[tuple] = []
            if prefetch and g.func(t.func).prefetch is not None:
                instrs.append(("PREFETCH",))
            instrs.extend(("WAIT", ev) for ev in m.task_in[t.id])
            instrs.append(("EXEC",))
            instrs.extend(("NOTIFY", ev) for ev in m.task_out[t.id])
            qt = QueuedTask(t.call, t.coord, tuple(instrs))
            if t.resource == "DMA":
                dma.append(qt)
            else:
                queues[deal % num_sms].append(qt)
                deal += 1
        built.append(StaticSample(
            binding,
            tuple(tuple(q) for q in queues),
            tuple(dma),
            layout,
            tuple(e.count for e in m.events),
        ))
    built.sort(key=lambda s: _sample_key(g, s.binding))
    keys = [_sample_key(g, s.binding) for s in built]
    if len(set(keys)) != len(keys):
        raise LoweringError("duplicate sampled bindings")
    return StaticMegakernel(g, num_sms, tuple(built), prefetch)


@dataclass(frozen=True)
class SelectedQueues:
    index: int
    sample: StaticSample
    # (call, coord) of tasks outside the actual shape
    masked: frozenset


def select_queues(k: StaticMegakernel, actual: Mapping[str, int]) -> SelectedQueues:
    """Pick the sample for ``actual``: exact match, else the unique
    component-wise smallest sample that dominates it."""
    g = k.graph
    actual = {s: int(actual[s]) for s in g.symbols if s in actual}
    missing = set(g.symbols) - set(actual)
    if missing:
        raise LoweringError(f"binding is missing symbols {sorted(missing)}")
    chosen = None
    for i, s in enumerate(k.samples):
        if all(s.binding[x] == actual[x] for x in g.symbols):
            chosen = i
            break
    if chosen is None:
        cands = [i for i, s in enumerate(k.samples) if all(s.binding[x] >= actual[x] for x in g.symbols)]
        if not cands:
            raise LoweringError(f"binding {actual} exceeds the largest sampled shape")
        minimal = [
            i for i in cands
            if not any(
                j != i and all(k.samples[j].binding[x] <= k.samples[i].binding[x] for x in g.symbols)
                for j in cands
            )
        ]
        if len(minimal) != 1:
            raise LoweringError(f"binding {actual} has no unique next-larger sample")
        chosen = minimal[0]
    sample = k.samples[chosen]
    try:
        for c in g.constraints:
            if eval_expr(c, actual) != 0:
                raise LoweringError(f"constraint {c} == 0 violated for binding {actual}")
        grids = [eval_shape(g.launch_grid(c), actual) for c in g.calls]
    except (InstantiationError, SymShapeError) as e:
        raise LoweringError(str(e)) from None
    masked = frozenset(
        t.key for t in sample.all_tasks()
        if any(c >= d for c, d in zip(t.coord, grids[t.call]))
    )
    return SelectedQueues(chosen, sample, masked)


def worst_case_rewrite(g: GraphFunction) -> GraphFunction:
    """Collapse every data-dependent event tensor onto a size-1 barrier.

    Data-dependent notifies become ``E[0]`` notifies and range triggers
    become ``E[0]`` waits; the barrier count is the number of producer
    tasks in the (padded) grid. ``extent`` is kept so that tiles beyond the
    realized count can be skipped at run time.
    """
    dd_events = {e.name for e in g.event_tensors if e.data_dependent}
    for c in g.calls:
        for e in (*c.in_edges, *c.out_edges):
            if e.data_dependent:
                dd_events.add(e.event)
    if not dd_events:
        return g

    def fix(edges):
        return tuple(
            EdgeSpec(e.event, StaticMap((const(0),))) if e.event in dd_events else e
            for e in edges
        )

    events = tuple(
        EventTensorDecl(e.name, (const(1),), DerivedCount()) if e.name in dd_events else e
        for e in g.event_tensors
    )
    calls = tuple(dataclasses.replace(c, in_edges=fix(c.in_edges), out_edges=fix(c.out_edges)) for c in g.calls)
    return dataclasses.replace(g, event_tensors=events, calls=calls)


def check_queue_topology(k: StaticMegakernel) -> list[str]:
    """For every queued task, each producer must sit on another queue or
    earlier on the same one. Also checks every task is queued exactly once."""
    problems = []
    for si, s in enumerate(k.samples):
        m = instantiate(k.graph, s.binding, check=False)
        where = {}
        qs = list(s.queues) + [s.dma_queue]
        for qi, q in enumerate(qs):
            for pos, t in enumerate(q):
                if t.key in where:
                    problems.append(f"sample {si}: task {t.key} queued twice")
                where[t.key] = (qi, pos)
        for t in m.tasks:
            if t.key not in where:
                problems.append(f"sample {si}: task {t.key} missing from queues")
        if len(where) != len(m.tasks):
            problems.append(f"sample {si}: {len(where)} queued tasks, {len(m.tasks)} in graph")
        for t in m.tasks:
            if t.key not in where:
                continue
            qi, pos = where[t.key]
            for ev in m.task_in[t.id]:
                for p in m.producers[ev]:
                    pq, ppos = where.get(m.tasks[p].key, (None, None))
                    if pq == qi and ppos > pos:
                        problems.append(f"sample {si}: producer {m.tasks[p].key} queued after consumer {t.key} on queue {qi}")
    return problems
