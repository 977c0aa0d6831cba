"""Planning and simulation toolkit for serving heterogeneous RAG pipelines."""

from .allocator import (
    AllocationPlan,
    AllocationProblem,
    Infeasible,
    brute_force_solve,
    replan_with_extra,
    solve_max_throughput,
    solve_minmax_latency,
    validate_plan,
)
from .latency import (
    GroundTruthLatency,
    ProfilePoint,
    PwlFit,
    PwlLatencyEstimator,
    eval_ground_truth,
    fit_pwl,
    profile,
)
from .pipeline import (
    ComponentNode,
    Edge,
    PipelineError,
    PipelineGraph,
    ResourceKind,
    expected_visit_rates,
    forward_order,
    parse_pipeline,
    serialize_pipeline,
)
from .scheduler import (
    MitigationState,
    RunningAverageEstimator,
    mitigate,
    predict_violation,
    route,
    update_estimate,
)
from .simulator import MetricsReport, Request, ScenarioConfig, run, toggle_features

__version__ = "0.1.0"
