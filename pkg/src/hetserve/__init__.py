"""Throughput-oriented LLM serving toolkit for heterogeneous clusters.

Plans per-machine tensor-parallel deployments from lightweight profiling
data, schedules requests across unequal instances with a capacity- and
memory-aware workload model, validates both against a deterministic cluster
simulator, and serves decisions through an HTTP scheduling gateway.
"""

from .capacity import (
    FeasibilityVerdict,
    KvBudget,
    RunningTokens,
    check_memory_constraint,
    kv_budget,
    kv_bytes_per_token,
    kv_usage,
)
from .core import (
    ClusterSpec,
    DeploymentConfig,
    EngineOverheads,
    MachinePlacement,
    MachineSpec,
    ModelSpec,
    Request,
    WorkloadLimits,
    deployment_for,
    enumerate_tp_degrees,
    parse_cluster_spec,
    parse_trace,
    serialize_cluster_spec,
    serialize_trace,
)
from .errors import (
    FitError,
    HetserveError,
    InfeasibleConfigError,
    InfeasibleError,
    InfeasibleRequestError,
    RankDeficientError,
    SchedulingError,
    SpecError,
    TraceError,
)
from .latency import (
    FitDiagnostics,
    FittedRecord,
    LatencyParams,
    ProfilingSample,
    decode_iteration_time,
    decode_time,
    fit_params,
    prefill_time,
    read_params_file,
    read_samples,
    write_params_file,
    write_samples,
)
from .planner import (
    BatchPlan,
    MachineEstimate,
    SearchOutcome,
    ThroughputEstimate,
    estimate_batch_time,
    estimate_instance_throughput,
    estimate_system_throughput,
    plan_static_batches,
    search_optimal_config,
    time_batches,
)
from .scheduling import (
    POLICIES,
    InstanceHandle,
    OutputLengthPredictor,
    PolicyConfig,
    PredictorConfig,
    Scheduler,
    ideal_batch_size,
    per_request_cost,
    request_oversized,
    workload,
)
from .simulator import (
    Scenario,
    SimMetrics,
    build_instances,
    generate_arrivals,
    load_scenario,
    metrics_record,
    policy_from_mapping,
    run_continuous,
    run_policy_comparison,
    run_scenario,
    run_static,
    write_metrics,
)

__version__ = "0.1.0"
