"""Event Tensor: symbolic task graphs lowered to static or dynamic
megakernels and executed on a deterministic SM simulator."""

from .durations import DurationModel, constant, skewed, table, uniform
from .ir import (
    CallDevice,
    DataDependentInit,
    DataDependentNotify,
    DerivedCount,
    DeviceFunctionDecl,
    Diagnostic,
    EdgeSpec,
    EventTensorDecl,
    GraphFunction,
    RangeTrigger,
    RuntimeTensorDecl,
    StaticMap,
    graph_from_dict,
    graph_summary,
    graph_to_dict,
    load_graph,
    save_graph,
    validate_graph,
)
from .materialize import (
    InstantiationError,
    MaterializedTaskGraph,
    RoutingRealization,
    check_trace,
    critical_path,
    instantiate,
    list_schedule,
)
from .metrics import Metrics, compare, compute_metrics, export_trace
from .sched_dynamic import DynamicMegakernel, enable_early_push, lower_dynamic
from .sched_static import (
    LoweringError,
    StaticMegakernel,
    check_queue_topology,
    lower_static,
    select_queues,
    worst_case_rewrite,
)
from .simcore import (
    CounterUnderflowError,
    DeadlockError,
    SimConfig,
    SimulationError,
    StepLimitError,
    Trace,
    barrier_rewrite,
    simulate,
    simulate_barrier_baseline,
)
from .symshape import SymExpr, SymShapeError, const, eval_expr, parse_expr, sym

__version__ = "0.1.0"
