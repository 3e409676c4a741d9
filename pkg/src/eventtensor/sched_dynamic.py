"""Dynamic scheduling: push/pop over a centralized on-device ready queue.

Lowering produces a per-call instruction template and, per event tensor,
the rules that decide which consumer tasks to push when an element fires.
Consumer lists for static maps are inverted when the kernel is launched
for a concrete binding; range triggers push ``indptr[i]..indptr[i+1]``.

With early push, a consumer is pushed once every producer of its events
has started executing, and an explicit WAIT guards its execution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from .ir import GraphFunction, RangeTrigger, graph_from_dict, graph_to_dict, validate_graph
from .sched_static import LoweringError

__all__ = ["DynamicMegakernel", "lower_dynamic", "enable_early_push"]

INITIAL_READY_RULE = "no in-edges, or every consumed event element has zero producers and zero initial count"


@dataclass(frozen=True)
class DynamicMegakernel:
    graph: GraphFunction
    # per call: instruction skeleton, e.g. ("WAIT", "E"), ("NOTIFY", "E"), ("COMPLETE_ON", "E")
    templates: tuple[tuple[tuple, ...], ...]
    # event tensor -> consumer rules {"call": k, "kind": "static" | "range", "indptr": name?}
    triggers: dict[str, tuple[dict, ...]] = field(default_factory=dict)
    early_push: bool = False
    prefetch: bool = True
    initial_ready: str = INITIAL_READY_RULE
    mode: str = "dynamic"

    def wait_events(self, call: int) -> frozenset[str]:
        return frozenset(i[1] for i in self.templates[call] if i[0] == "WAIT")

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": "dynamic",
            "early_push": self.early_push,
            "prefetch": self.prefetch,
            "graph": graph_to_dict(self.graph),
            "templates": [[list(i) for i in t] for t in self.templates],
            "triggers": {k: [dict(r) for r in v] for k, v in self.triggers.items()},
            "initial_ready": self.initial_ready,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DynamicMegakernel":
        return cls(
            graph_from_dict(d["graph"]),
            tuple(tuple(tuple(i) for i in t) for t in d["templates"]),
            {k: tuple(v) for k, v in d["triggers"].items()},
            d.get("early_push", False),
            d.get("prefetch", True),
            d.get("initial_ready", INITIAL_READY_RULE),
        )


def _templates(g: GraphFunction, early_push: bool, prefetch: bool) -> tuple[tuple[tuple, ...], ...]:
    out = []
    for c in g.calls:
        t: list[tuple] = []
        if prefetch and g.func(c.func).prefetch is not None:
            t.append(("PREFETCH",))
        for e in c.in_edges:
            if early_push or g.event(e.event).data_dependent:
                t.append(("WAIT", e.event))
        t.append(("EXEC",))
        for e in c.out_edges:
            t.append(("NOTIFY", e.event))
            t.append(("COMPLETE_ON", e.event))
        out.append(tuple(t))
    return tuple(out)


def lower_dynamic(g: GraphFunction, early_push: bool = False, prefetch: bool = True) -> DynamicMegakernel:
    """Lower ``g`` to a push/pop megakernel. Data-dependent edges are kept."""
    diags = validate_graph(g)
    if diags:
        raise LoweringError("invalid graph: " + "; ".join(map(str, diags)))
    triggers: dict[str, list[dict]] = {e.name: [] for e in g.event_tensors}
    for k, c in enumerate(g.calls):
        for e in c.in_edges:
            if isinstance(e.map, RangeTrigger):
                triggers[e.event].append({"call": k, "kind": "range", "indptr": e.map.indptr})
            else:
                triggers[e.event].append({"call": k, "kind": "static"})
    return DynamicMegakernel(
        g,
        _templates(g, early_push, prefetch),
        {k: tuple(v) for k, v in triggers.items()},
        early_push,
        prefetch,
    )


def enable_early_push(k: DynamicMegakernel) -> DynamicMegakernel:
    """Switch the push condition to "all producers dispatched" and guard every
    consumer EXEC with WAITs. Idempotent."""
    if k.early_push:
        return k
    return dataclasses.replace(k, early_push=True, templates=_templates(k.graph, True, k.prefetch))
