"""Event Tensor graph IR.

A :class:`GraphFunction` is an ordered list of ``call_device`` launches.
Each launch names a device function (a grid of tasks) and annotates
in/out edges onto Event Tensors. Three edge map kinds are supported:

* :class:`StaticMap` -- one symbolic expression per event axis, over the
  task coordinates ``t0, t1, ...`` and the graph's shape symbols.
* :class:`DataDependentNotify` -- out-edge whose event index is read from a
  runtime routing tensor (``topk``) at the task's flattened coordinate.
* :class:`RangeTrigger` -- in-edge; task ``t0`` consumes event ``i`` iff
  ``indptr[i] <= t0 < indptr[i + 1]``.

The module also owns the workload-spec JSON format (:func:`graph_to_dict`,
:func:`graph_from_dict`, :func:`load_graph`, :func:`save_graph`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Union

from .durations import DurationModel, constant
from .symshape import SymExpr, as_expr, free_symbols

__all__ = [
    "DeviceFunctionDecl",
    "DerivedCount",
    "DataDependentInit",
    "EventTensorDecl",
    "RuntimeTensorDecl",
    "StaticMap",
    "DataDependentNotify",
    "RangeTrigger",
    "EdgeSpec",
    "CallDevice",
    "GraphFunction",
    "Diagnostic",
    "GraphSummary",
    "validate_graph",
    "graph_summary",
    "coord_symbols",
    "graph_to_dict",
    "graph_from_dict",
    "load_graph",
    "save_graph",
]

RESOURCES = ("SM", "DMA")
RUNTIME_ROLES = ("routing", "indptr", "counts")


def _exprs(xs: Iterable[Union[SymExpr, int, str]]) -> tuple[SymExpr, ...]:
    return tuple(as_expr(x) for x in xs)


def coord_symbols(rank: int) -> tuple[str, ...]:
    return tuple(f"t{i}" for i in range(rank))


@dataclass(frozen=True)
class DeviceFunctionDecl:
    name: str
    grid: tuple[SymExpr, ...]
    duration: DurationModel = constant(1)
    resource: str = "SM"
    prefetch: DurationModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", _exprs(self.grid))


@dataclass(frozen=True)
class DerivedCount:
    """Initial count = number of producer edges, computed at instantiation."""


@dataclass(frozen=True)
class DataDependentInit:
    """Initial counts read from a runtime tensor written by ``writer``.

    A ``counts`` tensor is read element-wise; a ``routing`` tensor is
    histogrammed (count of entries equal to each event index).
    """

    counts: str
    writer: str


@dataclass(frozen=True)
class EventTensorDecl:
    name: str
    shape: tuple[SymExpr, ...]
    init: Union[DerivedCount, DataDependentInit] = DerivedCount()

    def __post_init__(self):
        object.__setattr__(self, "shape", _exprs(self.shape))

    @property
    def data_dependent(self) -> bool:
        return isinstance(self.init, DataDependentInit)


@dataclass(frozen=True)
class RuntimeTensorDecl:
    name: str
    shape: tuple[SymExpr, ...]
    role: str
    writer: str

    def __post_init__(self):
        object.__setattr__(self, "shape", _exprs(self.shape))


@dataclass(frozen=True)
class StaticMap:
    index: tuple[SymExpr, ...]

    def __post_init__(self):
        object.__setattr__(self, "index", _exprs(self.index))


@dataclass(frozen=True)
class DataDependentNotify:
    """Event index = ``routing[flat(index)]``; ``index`` defaults to the task coords."""

    routing: str
    index: tuple[SymExpr, ...] | None = None

    def __post_init__(self):
        if self.index is not None:
            object.__setattr__(self, "index", _exprs(self.index))


@dataclass(frozen=True)
class RangeTrigger:
    indptr: str


EdgeMap = Union[StaticMap, DataDependentNotify, RangeTrigger]


@dataclass(frozen=True)
class EdgeSpec:
    event: str
    map: EdgeMap

    @property
    def data_dependent(self) -> bool:
        return not isinstance(self.map, StaticMap)


@dataclass(frozen=True)
class CallDevice:
    """One ``call_device`` launch.

    ``grid`` of ``None`` launches the declared grid. ``extent`` names an
    indptr runtime tensor: the launched grid is then an upper bound and the
    realized task count is ``indptr[-1]``.
    """

    func: str
    grid: tuple[SymExpr, ...] | None = None
    in_edges: tuple[EdgeSpec, ...] = ()
    out_edges: tuple[EdgeSpec, ...] = ()
    extent: str | None = None

    def __post_init__(self):
        if self.grid is not None:
            object.__setattr__(self, "grid", _exprs(self.grid))
        object.__setattr__(self, "in_edges", tuple(self.in_edges))
        object.__setattr__(self, "out_edges", tuple(self.out_edges))


@dataclass(frozen=True)
class GraphFunction:
    calls: tuple[CallDevice, ...] = ()
    event_tensors: tuple[EventTensorDecl, ...] = ()
    runtime_tensors: tuple[RuntimeTensorDecl, ...] = ()
    device_functions: tuple[DeviceFunctionDecl, ...] = ()
    symbols: tuple[str, ...] = ()
    size_symbol: str | None = None
    # each expression must evaluate to 0 under a valid binding
    constraints: tuple[SymExpr, ...] = ()
    name: str = "graph"

    def __post_init__(self):
        for f in ("calls", "event_tensors", "runtime_tensors", "device_functions", "symbols"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        object.__setattr__(self, "constraints", _exprs(self.constraints))

    def func(self, name: str) -> DeviceFunctionDecl:
        for d in self.device_functions:
            if d.name == name:
                return d
        raise KeyError(f"unknown device function {name!r}")

    def event(self, name: str) -> EventTensorDecl:
        for d in self.event_tensors:
            if d.name == name:
                return d
        raise KeyError(f"unknown event tensor {name!r}")

    def runtime(self, name: str) -> RuntimeTensorDecl:
        for d in self.runtime_tensors:
            if d.name == name:
                return d
        raise KeyError(f"unknown runtime tensor {name!r}")

    def launch_grid(self, call: CallDevice) -> tuple[SymExpr, ...]:
        return call.grid if call.grid is not None else self.func(call.func).grid

    def has_data_dependence(self) -> bool:
        if any(e.data_dependent for e in self.event_tensors):
            return True
        return any(e.data_dependent for c in self.calls for e in (*c.in_edges, *c.out_edges))

    def writer_call(self, func_name: str) -> int:
        idx = [i for i, c in enumerate(self.calls) if c.func == func_name]
        if len(idx) != 1:
            raise KeyError(f"device function {func_name!r} is called {len(idx)} times, expected 1")
        return idx[0]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


def validate_graph(g: GraphFunction) -> list[Diagnostic]:
    """Return every invariant violation in ``g`` (empty list means valid)."""
    diags: list[Diagnostic] = []

    def bad(code, msg):
        diags.append(Diagnostic(code, msg))

    for kind, decls in (
        ("device function", g.device_functions),
        ("event tensor", g.event_tensors),
        ("runtime tensor", g.runtime_tensors),
    ):
        seen = set()
        for d in decls:
            if d.name in seen:
                bad("duplicate name", f"{kind} {d.name!r} declared twice")
            seen.add(d.name)
    if len(set(g.symbols)) != len(g.symbols):
        bad("duplicate name", "symbol table has duplicates")
    if g.size_symbol is not None and g.size_symbol not in g.symbols:
        bad("unresolved symbol", f"size symbol {g.size_symbol!r} is not a declared symbol")

    symbols = set(g.symbols)
    funcs = {d.name: d for d in g.device_functions}
    events = {d.name: d for d in g.event_tensors}
    runtimes = {d.name: d for d in g.runtime_tensors}

    def check_exprs(exprs, where, allowed=symbols):
        for e in exprs:
            extra = free_symbols(e) - allowed
            if extra:
                bad("unbound symbol", f"{where}: {sorted(extra)} not declared")

    check_exprs(g.constraints, "constraint")
    for d in g.device_functions:
        if len(d.grid) < 1:
            bad("rank", f"device function {d.name!r} has an empty grid")
        if d.resource not in RESOURCES:
            bad("resource", f"device function {d.name!r} has unknown resource {d.resource!r}")
        check_exprs(d.grid, f"grid of {d.name!r}")
    for d in g.event_tensors:
        if len(d.shape) < 1:
            bad("rank", f"event tensor {d.name!r} has rank 0")
        check_exprs(d.shape, f"shape of event {d.name!r}")
        if isinstance(d.init, DataDependentInit):
            rt = runtimes.get(d.init.counts)
            if rt is None:
                bad("unresolved runtime tensor", f"event {d.name!r} init references {d.init.counts!r}")
            elif rt.role not in ("counts", "routing"):
                bad("runtime role", f"event {d.name!r} init tensor {rt.name!r} has role {rt.role!r}")
            ncalls = sum(1 for c in g.calls if c.func == d.init.writer)
            if d.init.writer not in funcs:
                bad("unresolved device function", f"event {d.name!r} init writer {d.init.writer!r}")
            elif ncalls != 1:
                bad("writer", f"init writer {d.init.writer!r} must be launched exactly once, found {ncalls}")
            if rt is not None and rt.writer != d.init.writer:
                bad("writer", f"event {d.name!r} names writer {d.init.writer!r} but {rt.name!r} is written by {rt.writer!r}")
    for d in g.runtime_tensors:
        if d.role not in RUNTIME_ROLES:
            bad("runtime role", f"runtime tensor {d.name!r} has unknown role {d.role!r}")
        if d.writer not in funcs:
            bad("unresolved device function", f"runtime tensor {d.name!r} writer {d.writer!r}")
        if d.role == "indptr" and len(d.shape) != 1:
            bad("rank", f"indptr tensor {d.name!r} must be 1-D")
        check_exprs(d.shape, f"shape of runtime tensor {d.name!r}")

    # call index of each runtime tensor's writer, for ordering checks
    writer_index = {}
    for d in g.runtime_tensors:
        idx = [i for i, c in enumerate(g.calls) if c.func == d.writer]
        if len(idx) == 1:
            writer_index[d.name] = idx[0]
        elif d.writer in funcs:
            bad("writer", f"runtime tensor {d.name!r} writer {d.writer!r} launched {len(idx)} times")

    writers_of: dict[str, list[int]] = {}
    for k, c in enumerate(g.calls):
        for e in c.out_edges:
            writers_of.setdefault(e.event, []).append(k)

    def check_runtime_use(name, role, k, where):
        rt = runtimes.get(name)
        if rt is None:
            bad("unresolved runtime tensor", f"{where}: {name!r}")
            return None
        if rt.role != role:
            bad("runtime role", f"{where}: {name!r} has role {rt.role!r}, expected {role!r}")
        if name in writer_index and writer_index[name] >= k:
            bad("program order", f"{where}: {name!r} is written by call {writer_index[name]}, not before call {k}")
        return rt

    for k, c in enumerate(g.calls):
        where = f"call {k} ({c.func})"
        decl = funcs.get(c.func)
        if decl is None:
            bad("unresolved device function", f"{where}: {c.func!r}")
            continue
        grid = g.launch_grid(c)
        if len(grid) != len(decl.grid):
            bad("launch rank", f"{where}: launch rank {len(grid)} != declared rank {len(decl.grid)}")
        check_exprs(grid, f"{where} grid")
        allowed = symbols | set(coord_symbols(len(grid)))
        if c.extent is not None:
            check_runtime_use(c.extent, "indptr", k, f"{where} extent")
            if len(grid) != 1:
                bad("rank", f"{where}: extent requires a 1-D grid")
        for direction, edges in (("in", c.in_edges), ("out", c.out_edges)):
            for e in edges:
                ew = f"{where} {direction}-edge {e.event!r}"
                ev = events.get(e.event)
                if ev is None:
                    bad("unresolved event", f"{ew}: event tensor not declared")
                    continue
                m = e.map
                if isinstance(m, StaticMap):
                    if len(m.index) != len(ev.shape):
                        bad("map arity", f"{ew}: {len(m.index)} index exprs for rank-{len(ev.shape)} event")
                    check_exprs(m.index, ew, allowed)
                elif isinstance(m, DataDependentNotify):
                    if direction != "out":
                        bad("edge direction", f"{ew}: DataDependentNotify only allowed on out-edges")
                    rt = check_runtime_use(m.routing, "routing", k, ew)
                    if len(ev.shape) != 1:
                        bad("map arity", f"{ew}: data-dependent notify needs a rank-1 event tensor")
                    if m.index is not None:
                        check_exprs(m.index, ew, allowed)
                        if rt is not None and len(m.index) != len(rt.shape):
                            bad("map arity", f"{ew}: index rank {len(m.index)} != routing rank {len(rt.shape)}")
                    if decl.resource == "DMA":
                        bad("resource", f"{ew}: DMA functions cannot have data-dependent out-edges")
                elif isinstance(m, RangeTrigger):
                    if direction != "in":
                        bad("edge direction", f"{ew}: RangeTrigger only allowed on in-edges")
                    check_runtime_use(m.indptr, "indptr", k, ew)
                    if len(grid) != 1:
                        bad("rank", f"{ew}: RangeTrigger requires a 1-D launch grid")
                    if len(ev.shape) != 1:
                        bad("map arity", f"{ew}: RangeTrigger needs a rank-1 event tensor")
                else:
                    bad("edge map", f"{ew}: unknown map {type(m).__name__}")
                if direction == "in":
                    late = [w for w in writers_of.get(e.event, []) if w > k]
                    if late:
                        bad("program order", f"{ew}: event also written by later call(s) {late}")
    return diags


@dataclass(frozen=True)
class GraphSummary:
    calls: int
    events: int
    runtime: int
    symbols: frozenset[str] = field(default_factory=frozenset)


def graph_summary(g: GraphFunction) -> GraphSummary:
    return GraphSummary(
        calls=len(g.calls),
        events=len(g.event_tensors),
        runtime=len(g.runtime_tensors),
        symbols=frozenset(g.symbols),
    )


# ---------------------------------------------------------------------------
# workload-spec JSON
# ---------------------------------------------------------------------------

def _s(exprs) -> list[str]:
    return [str(e) for e in exprs]


def _edge_to_dict(e: EdgeSpec) -> dict[str, Any]:
    m = e.map
    if isinstance(m, StaticMap):
        mp = {"kind": "static", "index": _s(m.index)}
    elif isinstance(m, DataDependentNotify):
        mp = {"kind": "data_dependent_notify", "routing": m.routing}
        if m.index is not None:
            mp["index"] = _s(m.index)
    else:
        mp = {"kind": "range_trigger", "indptr": m.indptr}
    return {"event": e.event, "map": mp}


def _edge_from_dict(d: dict[str, Any]) -> EdgeSpec:
    mp = d["map"]
    kind = mp["kind"]
    if kind == "static":
        m = StaticMap(mp["index"])
    elif kind == "data_dependent_notify":
        m = DataDependentNotify(mp["routing"], mp.get("index"))
    elif kind == "range_trigger":
        m = RangeTrigger(mp["indptr"])
    else:
        raise ValueError(f"unknown edge map kind {kind!r}")
    return EdgeSpec(d["event"], m)


def graph_to_dict(g: GraphFunction) -> dict[str, Any]:
    out: dict[str, Any] = {
        "name": g.name,
        "symbols": list(g.symbols),
        "size_symbol": g.size_symbol,
        "constraints": _s(g.constraints),
        "device_functions": [],
        "event_tensors": [],
        "runtime_tensors": [],
        "calls": [],
    }
    for d in g.device_functions:
        out["device_functions"].append({
            "name": d.name,
            "grid": _s(d.grid),
            "duration": d.duration.to_dict(),
            "resource": d.resource,
            "prefetch": d.prefetch.to_dict() if d.prefetch is not None else None,
        })
    for d in g.event_tensors:
        if isinstance(d.init, DataDependentInit):
            init = {"kind": "data_dependent", "counts": d.init.counts, "writer": d.init.writer}
        else:
            init = {"kind": "derived"}
        out["event_tensors"].append({"name": d.name, "shape": _s(d.shape), "init": init})
    for d in g.runtime_tensors:
        out["runtime_tensors"].append({"name": d.name, "shape": _s(d.shape), "role": d.role, "writer": d.writer})
    for c in g.calls:
        out["calls"].append({
            "func": c.func,
            "grid": _s(c.grid) if c.grid is not None else None,
            "extent": c.extent,
            "in_edges": [_edge_to_dict(e) for e in c.in_edges],
            "out_edges": [_edge_to_dict(e) for e in c.out_edges],
        })
    return out


def graph_from_dict(d: dict[str, Any]) -> GraphFunction:
    funcs = []
    for f in d.get("device_functions", []):
        pf = f.get("prefetch")
        funcs.append(DeviceFunctionDecl(
            f["name"],
            f["grid"],
            DurationModel.from_dict(f.get("duration", 1)),
            f.get("resource", "SM"),
            DurationModel.from_dict(pf) if pf is not None else None,
        ))
    events = []
    for e in d.get("event_tensors", []):
        init = e.get("init", {"kind": "derived"})
        if init["kind"] == "data_dependent":
            ini = DataDependentInit(init["counts"], init["writer"])
        elif init["kind"] == "derived":
            ini = DerivedCount()
        else:
            raise ValueError(f"unknown event init kind {init['kind']!r}")
        events.append(EventTensorDecl(e["name"], e["shape"], ini))
    runtimes = [
        RuntimeTensorDecl(r["name"], r["shape"], r["role"], r["writer"])
        for r in d.get("runtime_tensors", [])
    ]
    calls = [
        CallDevice(
            c["func"],
            c.get("grid"),
            tuple(_edge_from_dict(e) for e in c.get("in_edges", [])),
            tuple(_edge_from_dict(e) for e in c.get("out_edges", [])),
            c.get("extent"),
        )
        for c in d.get("calls", [])
    ]
    return GraphFunction(
        calls=calls,
        event_tensors=events,
        runtime_tensors=runtimes,
        device_functions=funcs,
        symbols=d.get("symbols", []),
        size_symbol=d.get("size_symbol"),
        constraints=d.get("constraints", []),
        name=d.get("name", "graph"),
    )


def load_graph(path) -> tuple[GraphFunction, dict[str, Any]]:
    """Load a workload-spec file. Returns the graph and the raw document
    (callers read the optional ``sim`` and ``routing`` sections from it)."""
    doc = json.loads(Path(path).read_text())
    return graph_from_dict(doc), doc


def save_graph(g: GraphFunction, path, extra: dict[str, Any] | None = None) -> None:
    doc = graph_to_dict(g)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
