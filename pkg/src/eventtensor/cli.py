"""Command-line interface: emit -> compile -> run/baseline -> compare.

Exit codes: 0 success, 1 validation error, 2 simulation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any

from .durations import DurationModel, constant, uniform
from .ir import GraphFunction, graph_to_dict, load_graph, validate_graph
from .materialize import InstantiationError, RoutingRealization, eval_shape
from .metrics import compare, compute_metrics, export_trace
from .sched_dynamic import DynamicMegakernel, enable_early_push, lower_dynamic
from .sched_static import LoweringError, StaticMegakernel, lower_static, select_queues, worst_case_rewrite
from .simcore import SimConfig, SimulationError, Trace, simulate, simulate_barrier_baseline
from .symshape import SymShapeError
from .workloads import GENERATORS, MoEParams, moe_realization

__all__ = ["main", "save_kernel", "load_kernel", "realize_routing"]

VALIDATION_ERRORS = (LoweringError, InstantiationError, SymShapeError, ValueError, KeyError)


def save_kernel(kernel, path, extra: dict[str, Any] | None = None) -> None:
    doc = kernel.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc) + "\n")


def load_kernel(path) -> tuple[StaticMegakernel | DynamicMegakernel, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    mode = doc.get("mode")
    if mode == "static":
        return StaticMegakernel.from_dict(doc), doc
    if mode == "dynamic":
        return DynamicMegakernel.from_dict(doc), doc
    raise ValueError(f"{path}: unknown kernel mode {mode!r}")


def realize_routing(g: GraphFunction, section: dict | None, binding, seed: int) -> RoutingRealization | None:
    """Routing section forms: ``{"tensors": {...}}`` (explicit values) or
    ``{"moe": {experts, top_k, tile_size, hot_expert?, hot_prob?}}``
    (sampled from ``seed``; token count from the ``topk`` shape)."""
    if not g.runtime_tensors:
        return None
    if not section:
        raise ValueError("graph has runtime tensors but the spec has no routing section")
    if "tensors" in section:
        return RoutingRealization.from_dict(section["tensors"])
    if "moe" in section:
        p = dict(section["moe"])
        routing = [rt for rt in g.runtime_tensors if rt.role == "routing"]
        if len(routing) != 1:
            raise ValueError("moe routing section needs exactly one routing tensor")
        tokens = eval_shape(routing[0].shape, binding)[0]
        params = MoEParams(tokens=tokens, **p)
        return moe_realization(params, tokens, seed)
    raise ValueError(f"unknown routing section keys {sorted(section)}")


def _parse_bind(items) -> dict[str, int]:
    out = {}
    for item in items or []:
        for part in item.split(","):
            if not part:
                continue
            name, sep, value = part.partition("=")
            if not sep:
                raise ValueError(f"bad binding {part!r}, expected name=value")
            out[name.strip()] = int(value)
    return out


def _parse_duration(text: str) -> DurationModel:
    """``constant:4`` or ``uniform:1:10``."""
    kind, *args = text.split(":")
    if kind == "constant" and len(args) == 1:
        return constant(int(args[0]))
    if kind == "uniform" and len(args) == 2:
        return uniform(int(args[0]), int(args[1]))
    raise ValueError(f"bad duration model {text!r}; use constant:V or uniform:LO:HI")


def _with_duration(g: GraphFunction, model: DurationModel) -> GraphFunction:
    funcs = tuple(dataclasses.replace(d, duration=model) for d in g.device_functions)
    return dataclasses.replace(g, device_functions=funcs)


def _parse_samples(text: str, g: GraphFunction) -> list[dict[str, int]]:
    """``1,2,4,8`` binds the size symbol; ``b=1;b=2`` gives full bindings."""
    if not text:
        return [{}]
    if "=" in text:
        return [_parse_bind([s]) for s in text.split(";")]
    if not g.size_symbol:
        raise ValueError("graph has no size symbol; give samples as name=value;name=value")
    return [{g.size_symbol: int(x)} for x in text.split(",")]


def _sim_config(section: dict | None, args) -> SimConfig:
    d = dict(section or {})
    for name in ("num_sms", "notify_cost", "pop_cost", "push_cost_per_task", "poll_quantum", "seed", "step_limit"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    return SimConfig.from_dict(d)


def _write_run(trace: Trace, args, label: str) -> None:
    trace.config["label"] = label
    if args.trace:
        trace.save(args.trace)
    if args.chrome:
        export_trace(trace, "chrome", args.chrome)
    if args.csv:
        export_trace(trace, "csv", args.csv)
    m = compute_metrics(trace)
    if args.report:
        Path(args.report).write_text(json.dumps({"config": trace.config, "metrics": m.to_dict()}, indent=2) + "\n")
    print(f"{label}: makespan {m.makespan}")
    for res, f in m.resources.items():
        print(f"  {res:>5}  busy {f['busy']:.3f}  spin {f['spin']:.3f}  idle {f['idle']:.3f}")


def cmd_emit(args) -> int:
    gen = GENERATORS[args.generator]
    params: dict[str, Any] = {}
    for item in args.param or []:
        k, _, v = item.partition("=")
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            params[k] = v
    extra: dict[str, Any] = {}
    if args.generator == "moe":
        moe_keys = ("experts", "top_k", "tile_size", "hot_expert", "hot_prob")
        g, _ = gen(MoEParams(**params))
        extra["routing"] = {"moe": {k: params[k] for k in moe_keys if k in params}}
    else:
        g = gen(**params)
    if args.duration_model:
        g = _with_duration(g, _parse_duration(args.duration_model))
    diags = validate_graph(g)
    if diags:
        raise ValueError("; ".join(map(str, diags)))
    if args.sms:
        extra["sim"] = {"num_sms": args.sms}
    doc = graph_to_dict(g)
    doc.update(extra)
    text = json.dumps(doc, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_compile(args) -> int:
    g, doc = load_graph(args.spec)
    diags = validate_graph(g)
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return 1
    sim = dict(doc.get("sim") or {})
    sms = args.sms or sim.get("num_sms", 4)
    sim["num_sms"] = sms
    if args.scheduler == "static":
        if args.early_push:
            raise ValueError("--early-push applies to the dynamic scheduler only")
        gs = worst_case_rewrite(g)
        k = lower_static(gs, _parse_samples(args.samples, gs), sms, prefetch=not args.no_prefetch)
    else:
        k = lower_dynamic(g, prefetch=not args.no_prefetch)
        if args.early_push:
            k = enable_early_push(k)
    extra = {"sim": sim, "source": graph_to_dict(g)}
    if "routing" in doc:
        extra["routing"] = doc["routing"]
    save_kernel(k, args.output, extra)
    print(f"compiled {g.name} ({args.scheduler}) -> {args.output}")
    return 0


def cmd_run(args) -> int:
    k, doc = load_kernel(args.kernel)
    if args.duration_model:
        model = _parse_duration(args.duration_model)
        k = dataclasses.replace(k, graph=_with_duration(k.graph, model))
    binding = _parse_bind(args.bind)
    cfg = _sim_config(doc.get("sim"), args)
    # the worst-case rewrite keeps runtime tensor declarations
    realization = realize_routing(k.graph, doc.get("routing"), binding, cfg.seed)
    trace = simulate(k, binding, realization, cfg)
    _write_run(trace, args, args.label or Path(args.kernel).stem)
    return 0


def cmd_baseline(args) -> int:
    g, doc = load_graph(args.spec)
    if args.duration_model:
        g = _with_duration(g, _parse_duration(args.duration_model))
    binding = _parse_bind(args.bind)
    cfg = _sim_config(doc.get("sim"), args)
    realization = realize_routing(g, doc.get("routing"), binding, cfg.seed)
    trace = simulate_barrier_baseline(g, binding, realization, cfg, scheduler=args.scheduler)
    _write_run(trace, args, args.label or "barrier")
    return 0


def cmd_compare(args) -> int:
    runs = []
    for path in args.runs:
        tr = Trace.from_dict(json.loads(Path(path).read_text()))
        label = tr.config.get("label") or Path(path).stem
        runs.append((label, compute_metrics(tr)))
    baseline = args.baseline
    labels = [lab for lab, _ in runs]
    if baseline not in labels:
        # allow naming the baseline by file stem
        stems = [Path(p).stem for p in args.runs]
        if baseline in stems:
            baseline = labels[stems.index(baseline)]
    report = compare(runs, baseline)
    print(report.table)
    if args.output:
        Path(args.output).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def cmd_inspect(args) -> int:
    k, doc = load_kernel(args.kernel)
    g = k.graph
    print(f"graph {g.name}  mode {k.mode}  symbols {list(g.symbols)}")
    if isinstance(k, StaticMegakernel):
        print(f"sms {k.num_sms}  prefetch {k.prefetch}  samples {len(k.samples)}")
        for s in k.samples:
            sizes = [len(q) for q in s.queues]
            print(f"  sample {dict(s.binding)}: queue lengths {sizes} dma {len(s.dma_queue)}")
            for tensor, (off, size) in s.layout.items():
                print(f"    {tensor}: counts {list(s.counters[off:off + size])}")
            if args.verbose:
                for i, q in enumerate(s.queues):
                    print(f"    sm{i}: " + " ".join(f"{g.calls[t.call].func}{list(t.coord)}" for t in q))
    else:
        print(f"early_push {k.early_push}  prefetch {k.prefetch}")
        for i, t in enumerate(k.templates):
            print(f"  call {i} {g.calls[i].func}: " + " ".join(":".join(map(str, x)) for x in t))
    if args.bind is not None and isinstance(k, StaticMegakernel):
        sel = select_queues(k, _parse_bind(args.bind))
        print(f"binding {_parse_bind(args.bind)} -> sample {dict(sel.sample.binding)}, {len(sel.masked)} masked tasks")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eventtensor", description="event-tensor megakernel compiler and simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def sim_flags(p):
        p.add_argument("--sms", dest="num_sms", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--notify-cost", dest="notify_cost", type=int)
        p.add_argument("--pop-cost", dest="pop_cost", type=int)
        p.add_argument("--push-cost", dest="push_cost_per_task", type=int)
        p.add_argument("--poll-quantum", dest="poll_quantum", type=int)
        p.add_argument("--step-limit", dest="step_limit", type=int)
        p.add_argument("--bind", action="append", help="name=value (repeatable or comma separated)")
        p.add_argument("--duration-model", help="override durations: constant:V or uniform:LO:HI")
        p.add_argument("--trace", help="write the simulation trace (JSON)")
        p.add_argument("--chrome", help="write a chrome trace-event file")
        p.add_argument("--csv", help="write interval CSV")
        p.add_argument("--report", help="write metrics + config JSON")
        p.add_argument("--label")

    p = sub.add_parser("emit", help="write a built-in workload spec")
    p.add_argument("generator", choices=sorted(GENERATORS))
    p.add_argument("--param", action="append", help="generator argument name=value")
    p.add_argument("--duration-model")
    p.add_argument("--sms", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_emit)

    p = sub.add_parser("compile", help="lower a workload spec to a megakernel")
    p.add_argument("spec")
    p.add_argument("--scheduler", choices=("static", "dynamic"), default="static")
    p.add_argument("--samples", default="", help="size-symbol samples, e.g. 1,2,4,8")
    p.add_argument("--sms", type=int)
    p.add_argument("--early-push", action="store_true")
    p.add_argument("--no-prefetch", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("run", help="simulate a compiled kernel")
    p.add_argument("kernel")
    sim_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("baseline", help="simulate the unfused barrier baseline")
    p.add_argument("spec")
    p.add_argument("--scheduler", choices=("list", "static"), default="list")
    sim_flags(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("compare", help="compare saved run traces")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("inspect", help="show queues and counts of a compiled kernel")
    p.add_argument("kernel")
    p.add_argument("--bind", action="append")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SimulationError as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
