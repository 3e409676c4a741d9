"""Deterministic discrete-event simulation of a lowered megakernel.

The machine is ``num_sms`` SMs plus one DMA channel. Event Tensors live in
a flat integer counter array: NOTIFY is an atomic decrement, WAIT spins
(occupying its resource) until the counter reads zero. In dynamic mode,
idle resources pop from a centralized FIFO and counter-zero (or, with
early push, all-producers-dispatched) pushes consumer tasks into it.

Time is integral. Every resource runs as a generator that yields commands
to the engine; commands at equal timestamps are served in resource-index
order, so runs are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

from .ir import (
    DerivedCount,
    EdgeSpec,
    EventTensorDecl,
    GraphFunction,
    StaticMap,
)
from .materialize import (
    InstantiationError,
    RoutingRealization,
    eval_shape,
    flat_index,
    instantiate,
    task_group,
)
from .sched_dynamic import DynamicMegakernel, lower_dynamic
from .sched_static import LoweringError, StaticMegakernel, lower_static, select_queues

__all__ = [
    "SimConfig",
    "SimulationError",
    "DeadlockError",
    "StepLimitError",
    "CounterUnderflowError",
    "Phase",
    "TaskRecord",
    "SchedEvent",
    "Trace",
    "simulate",
    "simulate_barrier_baseline",
    "barrier_rewrite",
]


@dataclass(frozen=True)
class SimConfig:
    num_sms: int = 4
    notify_cost: int = 0
    pop_cost: int = 0
    push_cost_per_task: int = 0
    poll_quantum: int = 1
    seed: int = 0
    step_limit: int = 10_000_000

    def __post_init__(self):
        if self.num_sms < 1:
            raise ValueError("num_sms must be >= 1")
        if min(self.notify_cost, self.pop_cost, self.push_cost_per_task) < 0:
            raise ValueError("costs must be >= 0")
        if self.poll_quantum <= 0:
            raise ValueError("poll_quantum must be > 0")
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown sim options {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


class SimulationError(RuntimeError):
    pass


class DeadlockError(SimulationError):
    def __init__(self, message: str, blocked: list):
        super().__init__(message)
        self.blocked = blocked


class StepLimitError(SimulationError):
    pass


class CounterUnderflowError(SimulationError):
    pass


@dataclass(frozen=True)
class Phase:
    kind: str  # prefetch | wait | exec | notify | pop | push
    start: int
    end: int


@dataclass
class TaskRecord:
    call: int
    func: str
    coord: tuple[int, ...]
    resource: str
    noop: bool = False
    phases: list[Phase] = field(default_factory=list)

    @property
    def exec_interval(self) -> tuple[int, int] | None:
        for p in self.phases:
            if p.kind == "exec":
                return (p.start, p.end)
        return None

    @property
    def wait_intervals(self) -> list[tuple[int, int]]:
        return [(p.start, p.end) for p in self.phases if p.kind == "wait"]

    @property
    def prefetch_interval(self) -> tuple[int, int] | None:
        for p in self.phases:
            if p.kind == "prefetch":
                return (p.start, p.end)
        return None


@dataclass(frozen=True)
class SchedEvent:
    kind: str  # push | pop | empty_poll | notify
    time: int
    resource: str | None = None
    task: tuple | None = None  # (call, coord)


@dataclass
class Trace:
    mode: str
    resources: list[str]
    records: list[TaskRecord]
    sched_events: list[SchedEvent]
    makespan: int
    final_counters: dict[str, list[int]]
    counter_log: list[tuple[int, str, int, int]] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def record(self, call: int, coord) -> TaskRecord:
        coord = tuple(coord)
        for r in self.records:
            if r.call == call and r.coord == coord and not r.noop:
                return r
        raise KeyError((call, coord))

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "resources": self.resources,
            "makespan": self.makespan,
            "config": self.config,
            "final_counters": self.final_counters,
            "records": [
                {
                    "call": r.call,
                    "func": r.func,
                    "coord": list(r.coord),
                    "resource": r.resource,
                    "noop": r.noop,
                    "phases": [[p.kind, p.start, p.end] for p in r.phases],
                }
                for r in self.records
            ],
            "sched_events": [
                [e.kind, e.time, e.resource, [e.task[0], list(e.task[1])] if e.task else None]
                for e in self.sched_events
            ],
            "counter_log": [list(x) for x in self.counter_log],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Trace":
        records = [
            TaskRecord(r["call"], r["func"], tuple(r["coord"]), r["resource"], r["noop"],
                       [Phase(k, s, e) for k, s, e in r["phases"]])
            for r in d["records"]
        ]
        events = [
            SchedEvent(k, t, res, (task[0], tuple(task[1])) if task else None)
            for k, t, res, task in d["sched_events"]
        ]
        return cls(d["mode"], d["resources"], records, events, d["makespan"], d["final_counters"],
                   [tuple(x) for x in d.get("counter_log", [])], d.get("config", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, cfg: SimConfig, counters: list[int | None], names: list[tuple[str, int]]):
        self.cfg = cfg
        self.now = 0
        self.heap: list = []
        self.seq = 0
        self.steps = 0
        self.counters = counters
        self.names = names  # addr -> (tensor, flat)
        self.waiters: dict[int, list] = {}
        self.counter_log: list[tuple[int, str, int, int]] = []
        self.sched_events: list[SchedEvent] = []

    def at(self, time: int, order: tuple, fn) -> None:
        heapq.heappush(self.heap, (time, order, self.seq, fn))
        self.seq += 1

    def run(self) -> None:
        while self.heap:
            time, _, _, fn = heapq.heappop(self.heap)
            self.steps += 1
            if self.steps > self.cfg.step_limit:
                raise StepLimitError(f"step limit {self.cfg.step_limit} exceeded at t={time}")
            self.now = time
            fn()

    def set_counter(self, addr: int, value: int) -> None:
        self.counters[addr] = value
        tensor, flat = self.names[addr]
        self.counter_log.append((self.now, tensor, flat, value))
        if value == 0:
            self._wake(addr)

    def notify(self, addr: int) -> bool:
        """Atomic decrement; True when the counter reaches zero."""
        v = self.counters[addr]
        tensor, flat = self.names[addr]
        if v is None:
            raise SimulationError(f"notify on {tensor}[{flat}] before its count was initialized")
        if v <= 0:
            raise CounterUnderflowError(f"counter {tensor}[{flat}] would go below zero at t={self.now}")
        self.counters[addr] = v - 1
        self.counter_log.append((self.now, tensor, flat, v - 1))
        if v - 1 == 0:
            self._wake(addr)
            return True
        return False

    def _wake(self, addr: int) -> None:
        q = self.cfg.poll_quantum
        for t0, proc in self.waiters.pop(addr, []):
            polls = -(-(self.now - t0) // q)
            self.at(t0 + polls * q, proc.order, proc.resume)


class _Proc:
    """Drives one resource generator. Commands:
    ``("delay", dt)``, ``("wait", addr)``, ``("pop",)``."""

    def __init__(self, engine: _Engine, order: tuple, name: str, gen: Iterator, popper=None):
        self.engine = engine
        self.order = order
        self.name = name
        self.gen = gen
        self.popper = popper
        self.done = False
        self.blocked_on = None
        self.value = None

    def resume(self) -> None:
        value, self.value = self.value, None
        self.blocked_on = None
        eng = self.engine
        while True:
            try:
                cmd = self.gen.send(value)
            except StopIteration:
                self.done = True
                return
            value = None
            op = cmd[0]
            if op == "delay":
                if cmd[1] > 0:
                    eng.at(eng.now + cmd[1], self.order, self.resume)
                    return
            elif op == "wait":
                addr = cmd[1]
                if eng.counters[addr] == 0:
                    continue
                self.blocked_on = ("wait", addr)
                eng.waiters.setdefault(addr, []).append((eng.now, self))
                return
            elif op == "pop":
                item = self.popper.try_pop(self)
                if item is None:
                    self.blocked_on = ("pop",)
                    return
                value = item
            else:
                raise SimulationError(f"unknown command {op!r}")


def _resource_names(num_sms: int) -> list[str]:
    return [f"sm{i}" for i in range(num_sms)] + ["dma"]


def _actual_grids(g: GraphFunction, binding, realization) -> list[tuple[int, ...]]:
    grids = []
    for c in g.calls:
        grid = eval_shape(g.launch_grid(c), binding)
        if c.extent is not None and realization is not None and c.extent in realization.tensors:
            grid = (realization[c.extent][-1],)
        grids.append(grid)
    return grids


def _finish(mode, names, engine, records, counters_by_tensor, cfg, extra) -> Trace:
    makespan = max((p.end for r in records for p in r.phases), default=0)
    config = dataclasses.asdict(cfg)
    config.update(extra)
    return Trace(mode, names, records, engine.sched_events, makespan, counters_by_tensor,
                 engine.counter_log, config)


# ---------------------------------------------------------------------------
# static mode
# ---------------------------------------------------------------------------

def _simulate_static(k: StaticMegakernel, binding, realization, cfg: SimConfig) -> Trace:
    if cfg.num_sms != k.num_sms:
        raise ValueError(f"static kernel was compiled for {k.num_sms} SMs, config has {cfg.num_sms}")
    g = k.graph
    sel = select_queues(k, binding)
    sample = sel.sample
    actual = {s: int(binding[s]) for s in g.symbols}
    try:
        grids = _actual_grids(g, actual, realization)
    except InstantiationError as e:
        raise LoweringError(str(e)) from None
    masked = set(sel.masked)
    for qt in sample.all_tasks():
        if qt.key in masked:
            continue
        if any(c >= d for c, d in zip(qt.coord, grids[qt.call])):
            masked.add(qt.key)  # beyond the realized extent

    names = [None] * len(sample.counters)
    for tensor, (off, size) in sample.layout.items():
        for i in range(size):
            names[off + i] = (tensor, i)
    engine = _Engine(cfg, list(sample.counters), names)
    records: list[TaskRecord] = []

    def durations(qt):
        call = g.calls[qt.call]
        decl = g.func(call.func)
        flat = flat_index(qt.coord, grids[qt.call])
        group = None
        if call.extent is not None and realization is not None and call.extent in realization.tensors:
            group = task_group(realization[call.extent], qt.coord[0])
        dur = decl.duration.sample(cfg.seed, qt.call, flat, group)
        pf = decl.prefetch.sample(cfg.seed, qt.call, flat, group) if decl.prefetch is not None else 0
        return dur, pf

    def runner(proc, res: str, queue):
        for qt in queue:
            noop = qt.key in masked
            rec = TaskRecord(qt.call, g.calls[qt.call].func, qt.coord, res, noop)
            records.append(rec)
            proc.current = rec
            dur, pf = (0, 0) if noop else durations(qt)
            inline_pf = pf if not any(i[0] == "PREFETCH" for i in qt.instrs) else 0
            pf_end = engine.now
            for ins in qt.instrs:
                op = ins[0]
                if op == "PREFETCH":
                    if not noop and pf > 0:
                        pf_end = engine.now + pf
                        rec.phases.append(Phase("prefetch", engine.now, pf_end))
                elif op == "WAIT":
                    t0 = engine.now
                    yield ("wait", ins[1])
                    if engine.now > t0:
                        rec.phases.append(Phase("wait", t0, engine.now))
                elif op == "EXEC":
                    if noop:
                        continue
                    if engine.now < pf_end:
                        yield ("delay", pf_end - engine.now)
                    start = engine.now
                    yield ("delay", dur + inline_pf)
                    rec.phases.append(Phase("exec", start, engine.now))
                elif op == "NOTIFY":
                    if cfg.notify_cost:
                        t0 = engine.now
                        yield ("delay", cfg.notify_cost)
                        rec.phases.append(Phase("notify", t0, engine.now))
                    engine.notify(ins[1])
                    engine.sched_events.append(SchedEvent("notify", engine.now, res, qt.key))
                else:
                    raise SimulationError(f"unknown static instruction {op!r}")
            proc.current = None

    res_names = _resource_names(k.num_sms)
    procs = []
    for i, queue in enumerate(list(sample.queues) + [sample.dma_queue]):
        proc = _Proc(engine, (0, i), res_names[i], None)
        proc.current = None
        proc.gen = runner(proc, res_names[i], queue)
        procs.append(proc)
        engine.at(0, proc.order, proc.resume)
    engine.run()
    stuck = [p for p in procs if not p.done]
    if stuck:
        blocked = [
            (p.name, p.current.func if p.current else None, p.current.coord if p.current else None,
             names[p.blocked_on[1]] if p.blocked_on and p.blocked_on[0] == "wait" else None)
            for p in stuck
        ]
        raise DeadlockError(f"deadlock at t={engine.now}: {len(stuck)} resource(s) blocked: {blocked}", blocked)
    counters = {t: list(engine.counters[off:off + size]) for t, (off, size) in sample.layout.items()}
    return _finish("static", res_names, engine, records, counters, cfg,
                   {"binding": actual, "sample": dict(sample.binding), "prefetch": k.prefetch})


# ---------------------------------------------------------------------------
# dynamic mode
# ---------------------------------------------------------------------------

class _ReadyQueues:
    def __init__(self, engine: _Engine, trace_key):
        self.engine = engine
        self.fifo = {"SM": deque(), "DMA": deque()}
        self.idle = {"SM": [], "DMA": []}
        self.key = trace_key
        self.klass = {}

    def try_pop(self, proc) -> int | None:
        kind = self.klass[proc.name]
        q = self.fifo[kind]
        eng = self.engine
        if q:
            tid = q.popleft()
            eng.sched_events.append(SchedEvent("pop", eng.now, proc.name, self.key(tid)))
            return tid
        eng.sched_events.append(SchedEvent("empty_poll", eng.now, proc.name, None))
        heapq.heappush(self.idle[kind], (proc.order, id(proc), proc))
        return None

    def push(self, tid: int, kind: str, by: str | None) -> None:
        eng = self.engine
        eng.sched_events.append(SchedEvent("push", eng.now, by, self.key(tid)))
        self.fifo[kind].append(tid)
        idle = self.idle[kind]
        if idle:
            _, _, proc = heapq.heappop(idle)
            tid = self.fifo[kind].popleft()
            eng.sched_events.append(SchedEvent("pop", eng.now, proc.name, self.key(tid)))
            proc.value = tid
            eng.at(eng.now, proc.order, proc.resume)


def _simulate_dynamic(k: DynamicMegakernel, binding, realization, cfg: SimConfig, mode: str = "dynamic") -> Trace:
    g = k.graph
    m = instantiate(g, binding, realization, seed=cfg.seed)
    names = [(e.tensor, e.flat) for e in m.events]
    # counters of data-dependent events become visible when their writer call completes
    counters: list[int | None] = [None if e.data_dependent else e.count for e in m.events]
    engine = _Engine(cfg, counters, names)
    res_names = _resource_names(cfg.num_sms)
    key = lambda tid: m.tasks[tid].key  # noqa: E731
    rq = _ReadyQueues(engine, key)

    wait_tensors = [k.wait_events(i) for i in range(len(g.calls))]
    has_pf_instr = [any(i[0] == "PREFETCH" for i in t) for t in k.templates]

    writer_of: dict[int, list[int]] = {}  # call -> DD event addrs it initializes
    for decl in g.event_tensors:
        if decl.data_dependent:
            wc = g.writer_call(decl.init.writer)
            writer_of.setdefault(wc, []).extend(e.id for e in m.events if e.tensor == decl.name)
    writer_left = {c: sum(1 for t in m.tasks if t.call == c) for c in writer_of}

    # push bookkeeping: number of in-events still to fire (or to be fully dispatched)
    pending = [sum(1 for ev in m.task_in[t.id] if m.producers[ev]) for t in m.tasks]
    dispatch_left = [len(p) for p in m.producers]
    done = [0]
    records: dict[int, TaskRecord] = {}

    def release(tid):
        pending[tid] -= 1
        return pending[tid] == 0

    def initialize_dd(call):
        writer_left[call] -= 1
        if writer_left[call] == 0:
            for addr in writer_of[call]:
                engine.set_counter(addr, m.events[addr].count)

    def early_push(tid, res, order):
        # producer ``tid`` is being dispatched; pushes overlap its execution
        npush = 0
        for ev in m.task_out[tid]:
            dispatch_left[ev] -= 1
            if dispatch_left[ev] == 0:
                for c in m.consumers[ev]:
                    if release(c):
                        npush += 1
                        when = engine.now + npush * cfg.push_cost_per_task
                        kind = m.tasks[c].resource
                        engine.at(when, (1, order[1]), lambda c=c, kind=kind: rq.push(c, kind, res))

    def runner(proc, res: str, kind: str):
        while True:
            tid = yield ("pop",)
            t = m.tasks[tid]
            rec = TaskRecord(t.call, t.func, t.coord, res)
            records[tid] = rec
            proc.current = rec
            if kind == "SM" and cfg.pop_cost:
                t0 = engine.now
                yield ("delay", cfg.pop_cost)
                rec.phases.append(Phase("pop", t0, engine.now))
            pf_end = engine.now
            if has_pf_instr[t.call] and t.prefetch > 0:
                pf_end = engine.now + t.prefetch
                rec.phases.append(Phase("prefetch", engine.now, pf_end))
            for ev in m.task_in[tid]:
                if m.events[ev].tensor in wait_tensors[t.call]:
                    t0 = engine.now
                    yield ("wait", ev)
                    if engine.now > t0:
                        rec.phases.append(Phase("wait", t0, engine.now))
            if engine.now < pf_end:
                yield ("delay", pf_end - engine.now)
            start = engine.now
            if k.early_push:
                early_push(tid, res, proc.order)
            yield ("delay", t.duration + (0 if has_pf_instr[t.call] else t.prefetch))
            rec.phases.append(Phase("exec", start, engine.now))
            done[0] += 1
            if t.call in writer_of:
                initialize_dd(t.call)
            for ev in m.task_out[tid]:
                if cfg.notify_cost:
                    t0 = engine.now
                    yield ("delay", cfg.notify_cost)
                    rec.phases.append(Phase("notify", t0, engine.now))
                fired = engine.notify(ev)
                engine.sched_events.append(SchedEvent("notify", engine.now, res, t.key))
                if fired and not k.early_push:
                    for c in m.consumers[ev]:
                        if release(c):
                            if cfg.push_cost_per_task:
                                t0 = engine.now
                                yield ("delay", cfg.push_cost_per_task)
                                rec.phases.append(Phase("push", t0, engine.now))
                            rq.push(c, m.tasks[c].resource, res)
            proc.current = None

    procs = []
    for i, res in enumerate(res_names):
        kind = "DMA" if res == "dma" else "SM"
        proc = _Proc(engine, (0, i), res, None, popper=rq)
        proc.current = None
        rq.klass[res] = kind
        proc.gen = runner(proc, res, kind)
        procs.append(proc)
    for t in m.tasks:
        if pending[t.id] == 0:
            rq.fifo[t.resource].append(t.id)
            engine.sched_events.append(SchedEvent("push", 0, None, t.key))
    for proc in procs:
        engine.at(0, proc.order, proc.resume)
    engine.run()
    if done[0] != len(m.tasks):
        blocked = [
            (p.name, p.current.func, p.current.coord,
             names[p.blocked_on[1]] if p.blocked_on and p.blocked_on[0] == "wait" else None)
            for p in procs if p.current is not None
        ]
        unreached = [m.tasks[i].key for i in range(len(m.tasks)) if i not in records]
        raise DeadlockError(
            f"deadlock at t={engine.now}: {len(m.tasks) - done[0]} task(s) unfinished, "
            f"blocked={blocked}, never popped={unreached[:10]}", blocked)
    by_tensor: dict[str, list[int]] = {}
    for e in m.events:
        by_tensor.setdefault(e.tensor, []).append(engine.counters[e.id])
    ordered = [records[t.id] for t in m.tasks]
    return _finish(mode, res_names, engine, ordered, by_tensor, cfg,
                   {"binding": dict(m.binding), "early_push": k.early_push, "prefetch": k.prefetch})


def simulate(
    kernel: StaticMegakernel | DynamicMegakernel,
    binding: Mapping[str, int],
    realization: RoutingRealization | None = None,
    cfg: SimConfig = SimConfig(),
) -> Trace:
    """Run ``kernel`` for one shape binding (and routing realization)."""
    if kernel.mode == "static":
        return _simulate_static(kernel, binding, realization, cfg)
    if kernel.mode == "dynamic":
        return _simulate_dynamic(kernel, binding, realization, cfg)
    raise ValueError(f"unknown kernel mode {kernel.mode!r}")


def barrier_rewrite(g: GraphFunction) -> GraphFunction:
    """Replace every cross-call dependency with a full barrier between
    consecutive calls. Intra-call edges (e.g. a DMA ring chain) are kept."""
    written_by: dict[str, set[int]] = {}
    read_by: dict[str, set[int]] = {}
    for k, c in enumerate(g.calls):
        for e in c.out_edges:
            written_by.setdefault(e.event, set()).add(k)
        for e in c.in_edges:
            read_by.setdefault(e.event, set()).add(k)

    def local(e: EdgeSpec, k: int) -> bool:
        return (not e.data_dependent
                and written_by.get(e.event, set()) <= {k}
                and read_by.get(e.event, set()) <= {k})

    stage = [f"__stage{k}" for k in range(len(g.calls))]
    calls = []
    for k, c in enumerate(g.calls):
        ins = tuple(e for e in c.in_edges if local(e, k))
        outs = tuple(e for e in c.out_edges if local(e, k))
        if k > 0:
            ins += (EdgeSpec(stage[k - 1], StaticMap((0,))),)
        if k < len(g.calls) - 1:
            outs += (EdgeSpec(stage[k], StaticMap((0,))),)
        calls.append(dataclasses.replace(c, in_edges=ins, out_edges=outs))
    events = tuple(
        dataclasses.replace(e, init=DerivedCount()) if e.data_dependent else e
        for e in g.event_tensors
    ) + tuple(EventTensorDecl(stage[k], (1,)) for k in range(len(g.calls) - 1))
    return dataclasses.replace(g, calls=tuple(calls), event_tensors=events, name=f"{g.name}_barrier")


def simulate_barrier_baseline(
    g: GraphFunction,
    binding: Mapping[str, int],
    realization: RoutingRealization | None = None,
    cfg: SimConfig = SimConfig(),
    scheduler: str = "list",
) -> Trace:
    """Unfused baseline: call ``k + 1`` starts only after all of call ``k``.

    ``scheduler="list"`` list-schedules each stage (greedy pops from the
    shared queue); ``"static"`` keeps the round-robin queues of the static
    lowering and only strengthens the waits.
    """
    gb = barrier_rewrite(g)
    if scheduler == "list":
        k = lower_dynamic(gb)
        return _simulate_dynamic(k, binding, realization, cfg, mode="barrier")
    if scheduler == "static":
        sample = {s: int(binding[s]) for s in gb.symbols}
        k = lower_static(gb, [sample], cfg.num_sms)
        tr = _simulate_static(k, binding, realization, cfg)
        tr.mode = "barrier-static"
        return tr
    raise ValueError(f"unknown barrier scheduler {scheduler!r}")
