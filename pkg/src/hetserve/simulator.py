"""Deterministic discrete-event simulation of a scheduled instance cluster.

Static mode mirrors the planner's batching rule exactly: each instance runs
its assigned requests as sequential KV-feasible batches. Continuous mode is an
iteration-level loop: at every decode boundary an instance retires finished
requests, admits queued ones FCFS while their full KV reservation fits, pays a
prefill for the newcomers, then prices one decode step for the whole batch.

Requests execute with their true output lengths; the scheduler only ever saw
predictions. All randomness flows from the scenario seed, so identical
scenarios produce identical metrics.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .capacity import kv_budget, kv_bytes_per_token, check_memory_constraint
from .core import ClusterSpec, DeploymentConfig, Request, deployment_for, parse_cluster_spec, parse_trace
from .errors import InfeasibleConfigError, InfeasibleRequestError, SpecError
from .latency import LatencyParams, decode_iteration_time, prefill_time, read_params_file
from .planner import estimate_batch_time, plan_static_batches
from .scheduling import (
    InstanceHandle,
    OutputLengthPredictor,
    PolicyConfig,
    PredictorConfig,
    Scheduler,
)

__all__ = [
    "Scenario",
    "InstanceMetrics",
    "SimMetrics",
    "generate_arrivals",
    "build_instances",
    "run_static",
    "run_continuous",
    "run_scenario",
    "run_policy_comparison",
    "load_scenario",
    "policy_from_mapping",
    "metrics_record",
    "write_metrics",
]

_EV_ARRIVAL = 0
_EV_STEP = 1


@dataclass(frozen=True)
class Scenario:
    """Everything one simulation run needs, including the fitted time models."""

    cluster: ClusterSpec
    config: DeploymentConfig
    trace: tuple[Request, ...]
    arrival_rate: float
    policy: PolicyConfig
    mode: str
    seed: int
    params: Mapping[tuple[str, int], LatencyParams]

    def __post_init__(self):
        if not self.trace:
            raise SpecError("scenario trace must be non-empty")
        if self.mode not in ("static", "continuous"):
            raise SpecError(f"mode must be 'static' or 'continuous', got {self.mode!r}")
        if not (self.arrival_rate > 0):
            raise SpecError(f"arrival rate must be positive or inf, got {self.arrival_rate}")


@dataclass(frozen=True)
class InstanceMetrics:
    id: str
    completion_time: float
    request_count: int
    token_count: int
    peak_kv_usage: float


@dataclass(frozen=True)
class SimMetrics:
    """Throughput and balance metrics for one run.

    ``assignments`` (instance index per request, trace order) and
    ``request_times`` ((arrival, departure) per request) stay in memory for
    analysis and tests; the serialized record carries only the summary.
    """

    policy: str
    mode: str
    rate: float
    system_throughput: float
    makespan: float
    completion_time_spread: float
    per_instance: tuple[InstanceMetrics, ...]
    assignments: tuple[int, ...]
    request_times: tuple[tuple[str, float, float], ...]
    residual_loads: tuple[float, ...]


def generate_arrivals(
    trace: Sequence[Request], rate: float, seed: int
) -> list[tuple[Request, float]]:
    """Arrival times for the trace: all zero for rate=inf, else seeded
    exponential inter-arrival gaps with mean 1/rate, accumulated."""
    if math.isinf(rate):
        return [(r, 0.0) for r in trace]
    if rate <= 0:
        raise SpecError(f"arrival rate must be positive, got {rate}")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate, size=len(trace))
    times = np.cumsum(gaps)
    return [(r, float(t)) for r, t in zip(trace, times)]


def build_instances(
    cluster: ClusterSpec,
    config: DeploymentConfig,
    params: Mapping[tuple[str, int], LatencyParams],
) -> list[InstanceHandle]:
    """Instantiate every deployed instance, enforcing the memory constraint."""
    handles: list[InstanceHandle] = []
    for placement in config.per_machine:
        machine = cluster.machine(placement.machine)
        budget = kv_budget(machine, placement.tp_degree, cluster.model, cluster.engine)
        verdict = check_memory_constraint(budget, cluster.limits, cluster.model)
        if not verdict.feasible:
            raise InfeasibleConfigError(
                f"machine {machine.name!r} at tp={placement.tp_degree} cannot hold one maximal "
                f"request (slack {verdict.slack_bytes:.0f} bytes)",
                machine=machine.name,
                slack_bytes=verdict.slack_bytes,
            )
        key = (machine.name, placement.tp_degree)
        if key not in params:
            raise SpecError(f"no fitted parameters for machine {machine.name!r} at tp={placement.tp_degree}")
        for k in range(placement.instance_count):
            handles.append(
                InstanceHandle(
                    id=f"{machine.name}/{k}",
                    machine=machine.name,
                    tp_degree=placement.tp_degree,
                    params=params[key],
                    budget=budget,
                )
            )
    return handles


def _make_predictor(scenario: Scenario) -> OutputLengthPredictor:
    cfg = scenario.policy.predictor
    if cfg.seed is None:
        cfg = replace(cfg, seed=scenario.seed)
    return OutputLengthPredictor(cfg, scenario.cluster.limits.max_output_len)


def _assemble(
    scenario: Scenario,
    instances: list[InstanceHandle],
    completion: list[float],
    req_count: list[int],
    tok_count: list[int],
    peak: list[float],
    assignments: list[int],
    times: dict[str, tuple[float, float]],
    scheduler: Scheduler,
) -> SimMetrics:
    makespan = max(completion) if completion else 0.0
    total_tokens = sum(tok_count)
    throughput = total_tokens / makespan if makespan > 0 else math.inf
    per_instance = tuple(
        InstanceMetrics(
            id=h.id,
            completion_time=completion[i],
            request_count=req_count[i],
            token_count=tok_count[i],
            peak_kv_usage=peak[i],
        )
        for i, h in enumerate(instances)
    )
    return SimMetrics(
        policy=scenario.policy.policy,
        mode=scenario.mode,
        rate=scenario.arrival_rate,
        system_throughput=throughput,
        makespan=makespan,
        completion_time_spread=max(completion) - min(completion) if completion else 0.0,
        per_instance=per_instance,
        assignments=tuple(assignments),
        request_times=tuple((rid, a, d) for rid, (a, d) in times.items()),
        residual_loads=tuple(scheduler.loads()),
    )


def run_static(scenario: Scenario) -> SimMetrics:
    """Static-batching execution; requires every request in the pool at once."""
    if not math.isinf(scenario.arrival_rate):
        raise SpecError("static mode needs arrival_rate=inf (a fully known queue)")
    instances = build_instances(scenario.cluster, scenario.config, scenario.params)
    scheduler = Scheduler(instances, scenario.cluster.model, scenario.policy)
    predictor = _make_predictor(scenario)

    assigned: list[list[Request]] = [[] for _ in instances]
    assignments: list[int] = []
    for req in scenario.trace:
        req = req.with_prediction(predictor.predict(req))
        idx = scheduler.choose(req)
        assigned[idx].append(req)
        assignments.append(idx)

    model = scenario.cluster.model
    per_token = kv_bytes_per_token(model)
    completion = [0.0] * len(instances)
    req_count = [0] * len(instances)
    tok_count = [0] * len(instances)
    peak = [0.0] * len(instances)
    times: dict[str, tuple[float, float]] = {}
    for i, handle in enumerate(instances):
        reqs = assigned[i]
        if not reqs:
            continue
        plan = plan_static_batches(reqs, handle.budget, model)
        clock = 0.0
        for start, stop in plan.batches:
            batch = reqs[start:stop]
            reserved = per_token * (
                sum(r.input_len for r in batch) + len(batch) * max(r.output_len for r in batch)
            )
            peak[i] = max(peak[i], reserved / handle.budget.total_bytes)
            clock += estimate_batch_time(batch, handle.params)
            for r in batch:
                scheduler.complete(r.id)
                times[r.id] = (0.0, clock)
                tok_count[i] += r.input_len + r.output_len
                req_count[i] += 1
        completion[i] = clock
    return _assemble(
        scenario, instances, completion, req_count, tok_count, peak, assignments, times, scheduler
    )


@dataclass
class _Running:
    req: Request
    generated: int = 0


@dataclass
class _InstanceRun:
    handle: InstanceHandle
    queue: deque = field(default_factory=deque)
    active: list = field(default_factory=list)
    reserved_tokens: int = 0
    step_scheduled: bool = False
    completion_time: float = 0.0
    request_count: int = 0
    token_count: int = 0
    peak_kv_usage: float = 0.0


def run_continuous(scenario: Scenario) -> SimMetrics:
    """Iteration-level event loop with conservative full-output KV reservation."""
    instances = build_instances(scenario.cluster, scenario.config, scenario.params)
    scheduler = Scheduler(instances, scenario.cluster.model, scenario.policy)
    predictor = _make_predictor(scenario)
    model = scenario.cluster.model
    per_token = kv_bytes_per_token(model)

    runs = [_InstanceRun(handle=h) for h in instances]
    assignments: list[int] = []
    arrival_time: dict[str, float] = {}
    times: dict[str, tuple[float, float]] = {}

    # Heap entries: (time, kind, tiebreak, payload). Arrivals sort before
    # instance steps at the same timestamp so a boundary sees the queue as of
    # that instant; remaining ties fall back to instance/request order.
    events: list[tuple[float, int, int, int]] = []
    for seq, (req, t) in enumerate(generate_arrivals(scenario.trace, scenario.arrival_rate, scenario.seed)):
        heapq.heappush(events, (t, _EV_ARRIVAL, seq, seq))

    def schedule_step(inst_idx: int, at: float) -> None:
        if not runs[inst_idx].step_scheduled:
            runs[inst_idx].step_scheduled = True
            heapq.heappush(events, (at, _EV_STEP, inst_idx, inst_idx))

    def admit(run: _InstanceRun) -> list[_Running]:
        budget = run.handle.budget.total_bytes
        newly: list[_Running] = []
        while run.queue:
            req: Request = run.queue[0]
            need = req.input_len + req.output_len
            if per_token * (run.reserved_tokens + need) > budget:
                if not run.active and not newly:
                    raise InfeasibleRequestError(
                        f"request {req.id!r} needs {per_token * need:.0f} KV bytes alone, budget of "
                        f"instance {run.handle.id!r} is {budget:.0f}",
                        request_id=req.id,
                    )
                break
            run.queue.popleft()
            run.reserved_tokens += need
            newly.append(_Running(req))
        if newly:
            run.peak_kv_usage = max(run.peak_kv_usage, per_token * run.reserved_tokens / budget)
        return newly

    while events:
        t, kind, tiebreak, payload = heapq.heappop(events)
        if kind == _EV_ARRIVAL:
            req = scenario.trace[payload]
            req = req.with_prediction(predictor.predict(req))
            idx = scheduler.choose(req)
            assignments.append(idx)
            arrival_time[req.id] = t
            runs[idx].queue.append(req)
            schedule_step(idx, t)
            continue

        run = runs[payload]
        run.step_scheduled = False
        # Retire requests whose final token was produced by the iteration
        # that just ended; hooks fire at the departure time.
        for r in [r for r in run.active if r.generated >= r.req.output_len]:
            run.active.remove(r)
            run.reserved_tokens -= r.req.input_len + r.req.output_len
            run.completion_time = t
            run.request_count += 1
            run.token_count += r.req.input_len + r.req.output_len
            times[r.req.id] = (arrival_time[r.req.id], t)
            scheduler.complete(r.req.id)

        newly = admit(run)
        if not run.active and not newly:
            continue  # idle until the next dispatch
        cost = 0.0
        if newly:
            cost += prefill_time(run.handle.params, len(newly), max(r.req.input_len for r in newly))
            run.active.extend(newly)
        batch = len(run.active)
        cached = max(r.req.input_len + r.generated + 1 for r in run.active)
        cost += decode_iteration_time(run.handle.params, cached, batch)
        for r in run.active:
            r.generated += 1
        schedule_step(payload, t + cost)

    completion = [r.completion_time for r in runs]
    req_count = [r.request_count for r in runs]
    tok_count = [r.token_count for r in runs]
    peak = [r.peak_kv_usage for r in runs]
    return _assemble(
        scenario, instances, completion, req_count, tok_count, peak, assignments, times, scheduler
    )


def run_scenario(scenario: Scenario) -> SimMetrics:
    if scenario.mode == "static":
        return run_static(scenario)
    return run_continuous(scenario)


def run_policy_comparison(scenario: Scenario, policies: Sequence[str]) -> list[SimMetrics]:
    """Run each policy on the identical arrival and prediction realization."""
    if not policies:
        raise SpecError("policy comparison needs at least one policy")
    results = []
    for name in policies:
        policy = replace(scenario.policy, policy=name)
        results.append(run_scenario(replace(scenario, policy=policy)))
    return results


def policy_from_mapping(node: Mapping) -> PolicyConfig:
    """Build a PolicyConfig from a parsed policy record (scenario/gateway files)."""
    if not isinstance(node, Mapping):
        raise SpecError("policy record must be a mapping")
    predictor_node = node.get("predictor", {}) or {}
    if not isinstance(predictor_node, Mapping):
        raise SpecError("policy.predictor must be a mapping")
    predictor = PredictorConfig(
        mode=str(predictor_node.get("mode", "oracle")),
        mean=predictor_node.get("mean"),
        stddev=predictor_node.get("stddev"),
        seed=predictor_node.get("seed"),
    )
    weights = node.get("wrr_weights")
    return PolicyConfig(
        policy=str(node.get("policy", "OS")),
        theta=float(node.get("theta", 2.0)),
        wrr_weights=tuple(float(w) for w in weights) if weights else None,
        predictor=predictor,
    )


def _parse_rate(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    if value is None:
        return math.inf
    return float(value)


def load_scenario(path: str | Path, **overrides) -> Scenario:
    """Load a scenario document; spec/trace/params paths resolve relative to it.

    Keyword overrides (policy, theta, rate, mode, seed) mirror the CLI flags.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"scenario {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError(f"scenario {path}: expected a mapping document")
    base = path.parent

    def _resolve(key: str) -> Path:
        if key not in doc:
            raise SpecError(f"scenario {path}: missing {key!r}")
        return base / str(doc[key])

    cluster = parse_cluster_spec(_resolve("spec").read_text())
    trace = parse_trace(_resolve("trace").read_text())
    params = read_params_file(_resolve("params").read_text())
    deployment_node = doc.get("deployment")
    if not isinstance(deployment_node, dict) or not deployment_node:
        raise SpecError(f"scenario {path}: 'deployment' must map machine names to tp degrees")
    config = deployment_for(cluster.machines, {str(k): int(v) for k, v in deployment_node.items()})

    policy = policy_from_mapping(doc.get("policy", {}))
    if "policy" in overrides and overrides["policy"] is not None:
        policy = replace(policy, policy=overrides["policy"])
    if "theta" in overrides and overrides["theta"] is not None:
        policy = replace(policy, theta=overrides["theta"])

    rate = _parse_rate(doc.get("arrival_rate"))
    if "rate" in overrides and overrides["rate"] is not None:
        rate = _parse_rate(overrides["rate"])
    mode = str(doc.get("mode", "continuous"))
    if "mode" in overrides and overrides["mode"] is not None:
        mode = overrides["mode"]
    seed = int(doc.get("seed", 0))
    if "seed" in overrides and overrides["seed"] is not None:
        seed = overrides["seed"]

    return Scenario(
        cluster=cluster,
        config=config,
        trace=tuple(trace),
        arrival_rate=rate,
        policy=policy,
        mode=mode,
        seed=seed,
        params=params,
    )


def metrics_record(metrics: SimMetrics) -> dict:
    """Summary record for the line-delimited metrics output."""
    return {
        "policy": metrics.policy,
        "mode": metrics.mode,
        "rate": "inf" if math.isinf(metrics.rate) else metrics.rate,
        "system_throughput": metrics.system_throughput,
        "makespan": metrics.makespan,
        "spread": metrics.completion_time_spread,
        "per_instance": [
            {
                "id": m.id,
                "completion_time": m.completion_time,
                "request_count": m.request_count,
                "token_count": m.token_count,
                "peak_kv_usage": m.peak_kv_usage,
            }
            for m in metrics.per_instance
        ],
    }


def write_metrics(metrics_list: Sequence[SimMetrics]) -> str:
    return "\n".join(json.dumps(metrics_record(m), sort_keys=True) for m in metrics_list) + "\n"
