"""Built-in graph generators for the running examples.

Every generator returns a graph that passes :func:`validate_graph`. The
MoE generator also returns a routing-realization generator.
"""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .durations import DurationModel, constant, uniform
from .ir import (
    CallDevice,
    DataDependentInit,
    DataDependentNotify,
    DeviceFunctionDecl,
    EdgeSpec,
    EventTensorDecl,
    GraphFunction,
    RangeTrigger,
    RuntimeTensorDecl,
    StaticMap,
)
from .materialize import RoutingRealization
from .symshape import SymExpr, as_expr, eval_expr, free_symbols, smin, sym

__all__ = [
    "splitk_rowsum",
    "symbolic_pipeline",
    "gemm_reduce_scatter",
    "all_gather_gemm",
    "MoEParams",
    "moe_layer",
    "moe_realization",
    "routing_from_topk",
    "random_dag",
    "randomize_durations",
    "GENERATORS",
]


def _edge(event: str, *index) -> EdgeSpec:
    return EdgeSpec(event, StaticMap(index))


def splitk_rowsum(partial: DurationModel = constant(1), final: DurationModel = constant(1)) -> GraphFunction:
    """Two-stage row sum over an ``(n*32, 128)`` input.

    ``partial_sum`` tile ``(i, j)`` sums 32 columns of 32 rows and notifies
    ``E[i]``; ``final_sum`` tile ``i`` waits on ``E[i]`` (count 4).
    """
    n = sym("n")
    return GraphFunction(
        name="splitk_rowsum",
        symbols=("n",),
        size_symbol="n",
        device_functions=(
            DeviceFunctionDecl("partial_sum", (n, 128 // 32), partial),
            DeviceFunctionDecl("final_sum", (n,), final),
        ),
        event_tensors=(EventTensorDecl("E", (n,)),),
        calls=(
            CallDevice("partial_sum", out_edges=(_edge("E", "t0"),)),
            CallDevice("final_sum", in_edges=(_edge("E", "t0"),)),
        ),
    )


def symbolic_pipeline(stages: int = 2, duration: DurationModel = constant(1)) -> GraphFunction:
    """A batch-symbolic template: ``stages`` device functions of grid ``(B,)``
    chained row by row. Batch 1 gives a 1 x stages task graph."""
    if stages < 1:
        raise ValueError("stages must be >= 1")
    B = sym("B")
    funcs = tuple(DeviceFunctionDecl(f"stage{s}", (B,), duration) for s in range(stages))
    events = tuple(EventTensorDecl(f"E{s}", (B,)) for s in range(stages - 1))
    calls = []
    for s in range(stages):
        ins = (_edge(f"E{s - 1}", "t0"),) if s > 0 else ()
        outs = (_edge(f"E{s}", "t0"),) if s < stages - 1 else ()
        calls.append(CallDevice(f"stage{s}", in_edges=ins, out_edges=outs))
    return GraphFunction(
        name="symbolic_pipeline",
        symbols=("B",),
        size_symbol="B",
        device_functions=funcs,
        event_tensors=events,
        calls=tuple(calls),
    )


def gemm_reduce_scatter(
    mm_tiles: SymExpr | int | str | None = None,
    fan_in: int = 2,
    mm: DurationModel = constant(4),
    rs: DurationModel = constant(2),
) -> GraphFunction:
    """GEMM tiles feeding Reduce-Scatter tiles, ``fan_in`` MM tiles per RS tile.

    ``mm_tiles`` defaults to ``fan_in * b`` with ``b`` the (symbolic) number
    of RS tiles.
    """
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    tiles = fan_in * sym("b") if mm_tiles is None else as_expr(mm_tiles)
    symbols = tuple(sorted(free_symbols(tiles)))
    rs_tiles = tiles // fan_in
    return GraphFunction(
        name="gemm_reduce_scatter",
        symbols=symbols,
        size_symbol="b" if "b" in symbols else (symbols[0] if len(symbols) == 1 else None),
        constraints=(tiles % fan_in,),
        device_functions=(
            DeviceFunctionDecl("MM", (tiles,), mm),
            DeviceFunctionDecl("RS", (rs_tiles,), rs),
        ),
        event_tensors=(EventTensorDecl("E", (rs_tiles,)),),
        calls=(
            CallDevice("MM", out_edges=(_edge("E", f"t0 // {fan_in}"),)),
            CallDevice("RS", in_edges=(_edge("E", "t0"),)),
        ),
    )


def all_gather_gemm(
    chunks: int,
    gemm_tiles_per_chunk: int,
    copy: DurationModel = constant(3),
    gemm: DurationModel = constant(2),
) -> GraphFunction:
    """Ring All-Gather on the DMA channel feeding GEMM tiles.

    Copy ``r`` waits on ``ring[r]`` (notified by copy ``r - 1``; ``ring[0]``
    has no producer) and notifies ``ring[r + 1]`` and ``arrival[r]``. GEMM
    tile ``(r, t)`` waits on ``arrival[r]``.
    """
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    return GraphFunction(
        name="all_gather_gemm",
        device_functions=(
            DeviceFunctionDecl("copy", (chunks,), copy, resource="DMA"),
            DeviceFunctionDecl("gemm", (chunks, gemm_tiles_per_chunk), gemm),
        ),
        event_tensors=(
            EventTensorDecl("ring", (chunks + 1,)),
            EventTensorDecl("arrival", (chunks,)),
        ),
        calls=(
            CallDevice(
                "copy",
                in_edges=(_edge("ring", "t0"),),
                out_edges=(_edge("ring", "t0 + 1"), _edge("arrival", "t0")),
            ),
            CallDevice("gemm", in_edges=(_edge("arrival", "t0"),)),
        ),
    )


@dataclass(frozen=True)
class MoEParams:
    tokens: int | str = 8
    experts: int = 4
    top_k: int = 2
    tile_size: int = 4
    seed: int = 0
    # a token routes to ``hot_expert`` with probability ``hot_prob``
    hot_expert: int | None = None
    hot_prob: float = 0.0
    route: DurationModel = constant(2)
    group: DurationModel = constant(1)
    gemm: DurationModel = constant(4)

    def __post_init__(self):
        if not 1 <= self.top_k <= self.experts:
            raise ValueError("need 1 <= top_k <= experts")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.hot_expert is not None and not 0 <= self.hot_expert < self.experts:
            raise ValueError("hot_expert out of range")
        if not 0.0 <= self.hot_prob <= 1.0:
            raise ValueError("hot_prob must be in [0, 1]")


def moe_layer(p: MoEParams) -> tuple[GraphFunction, Callable[..., RoutingRealization]]:
    """Routing (TopK) -> token grouping -> GroupGEMM.

    The GroupGEMM launch grid is the worst-case tile count
    ``(N*k + (T-1)*min(E, N*k)) // T``; the realized grid is
    ``exp_indptr[-1]``.
    """
    N = as_expr(p.tokens)
    k, E, T = p.top_k, p.experts, p.tile_size
    assignments = N * k
    bound = (assignments + (T - 1) * smin(E, assignments)) // T
    symbols = tuple(sorted(free_symbols(N)))
    g = GraphFunction(
        name="moe_layer",
        symbols=symbols,
        size_symbol=symbols[0] if len(symbols) == 1 else None,
        device_functions=(
            DeviceFunctionDecl("route", (1,), p.route),
            DeviceFunctionDecl("group", (N, k), p.group),
            DeviceFunctionDecl("expert_gemm", (bound,), p.gemm),
        ),
        runtime_tensors=(
            RuntimeTensorDecl("topk", (N, k), "routing", "route"),
            RuntimeTensorDecl("exp_indptr", (E + 1,), "indptr", "route"),
        ),
        event_tensors=(
            EventTensorDecl("routed", (1,)),
            EventTensorDecl("expert", (E,), DataDependentInit("topk", "route")),
        ),
        calls=(
            CallDevice("route", out_edges=(_edge("routed", 0),)),
            CallDevice(
                "group",
                in_edges=(_edge("routed", 0),),
                out_edges=(EdgeSpec("expert", DataDependentNotify("topk")),),
            ),
            CallDevice(
                "expert_gemm",
                in_edges=(EdgeSpec("expert", RangeTrigger("exp_indptr")),),
                extent="exp_indptr",
            ),
        ),
    )

    def realize(binding: Mapping[str, int] | None = None, seed: int | None = None) -> RoutingRealization:
        tokens = eval_expr(N, binding or {})
        return moe_realization(p, tokens, p.seed if seed is None else seed)

    return g, realize


def routing_from_topk(topk: Sequence[Sequence[int]], experts: int, tile_size: int) -> RoutingRealization:
    """Counts per expert, tiles per expert ``ceil(count / tile_size)`` and
    their prefix sum ``exp_indptr``."""
    counts = [0] * experts
    for row in topk:
        for e in row:
            counts[e] += 1
    indptr = [0]
    for c in counts:
        indptr.append(indptr[-1] + math.ceil(c / tile_size))
    flat = [e for row in topk for e in row]
    return RoutingRealization({"topk": flat, "exp_indptr": indptr})


def moe_realization(p: MoEParams, tokens: int, seed: int) -> RoutingRealization:
    rng = random.Random(seed)
    experts = list(range(p.experts))
    topk = []
    for _ in range(tokens):
        if p.hot_expert is not None and rng.random() < p.hot_prob:
            others = [e for e in experts if e != p.hot_expert]
            row = [p.hot_expert] + rng.sample(others, p.top_k - 1)
        else:
            row = rng.sample(experts, p.top_k)
        topk.append(row)
    return routing_from_topk(topk, p.experts, p.tile_size)


def random_dag(
    nodes: int,
    edges: int,
    seed: int,
    max_width: int = 4,
    duration: DurationModel = uniform(1, 10),
) -> GraphFunction:
    """Random layered DAG: one call per node (grid width in ``[1, max_width]``),
    ``edges`` random forward node pairs. Consumer tile ``t`` of an edge
    ``u -> v`` waits on ``e_u[t % width(u)]``."""
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    rng = random.Random(seed)
    widths = [rng.randint(1, max_width) for _ in range(nodes)]
    pairs = [(u, v) for v in range(nodes) for u in range(v)]
    chosen = sorted(rng.sample(pairs, min(edges, len(pairs))))
    has_consumer = {u for u, _ in chosen}
    funcs = tuple(DeviceFunctionDecl(f"n{i}", (widths[i],), duration) for i in range(nodes))
    events = tuple(EventTensorDecl(f"e{u}", (widths[u],)) for u in sorted(has_consumer))
    calls = []
    for v in range(nodes):
        ins = tuple(_edge(f"e{u}", f"t0 % {widths[u]}") for u, vv in chosen if vv == v)
        outs = (_edge(f"e{v}", "t0"),) if v in has_consumer else ()
        calls.append(CallDevice(f"n{v}", in_edges=ins, out_edges=outs))
    return GraphFunction(
        name=f"random_dag_{nodes}_{edges}_{seed}",
        device_functions=funcs,
        event_tensors=events,
        calls=tuple(calls),
    )


def randomize_durations(g: GraphFunction, lo: int, hi: int) -> GraphFunction:
    """Replace every device function's duration model with ``uniform(lo, hi)``."""
    funcs = tuple(dataclasses.replace(d, duration=uniform(lo, hi)) for d in g.device_functions)
    return dataclasses.replace(g, device_functions=funcs)


GENERATORS = {
    "splitk": splitk_rowsum,
    "pipeline": symbolic_pipeline,
    "gemm_rs": gemm_reduce_scatter,
    "ag_gemm": all_gather_gemm,
    "moe": moe_layer,
    "random_dag": random_dag,
}
