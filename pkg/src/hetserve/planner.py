"""Deployment planning: static-batching throughput estimation and exhaustive
search over per-machine tensor-parallel degrees.

The estimator groups a sample trace into the largest KV-feasible contiguous
batches, prices each batch with the fitted time models, and scales the
per-instance rate by the instance count. Absolute numbers undershoot a
continuous-batching engine; only the ranking across configurations is relied
on (and tested).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product
from typing import Mapping, Sequence

from .capacity import KvBudget, check_memory_constraint, kv_budget, kv_bytes_per_token
from .core import ClusterSpec, DeploymentConfig, MachinePlacement, ModelSpec, Request, enumerate_tp_degrees
from .errors import InfeasibleConfigError, InfeasibleRequestError, SpecError
from .latency import LatencyParams, decode_time, prefill_time

__all__ = [
    "BatchPlan",
    "MachineEstimate",
    "ThroughputEstimate",
    "SearchOutcome",
    "plan_static_batches",
    "estimate_batch_time",
    "time_batches",
    "estimate_instance_throughput",
    "estimate_system_throughput",
    "search_optimal_config",
]


@dataclass(frozen=True)
class BatchPlan:
    """Contiguous grouping of a request list, with per-batch seconds once timed.

    ``batches`` holds half-open index ranges that partition the input order.
    """

    batches: tuple[tuple[int, int], ...]
    per_batch_time: tuple[float, ...] = ()

    @property
    def total_time(self) -> float:
        return sum(self.per_batch_time)


def plan_static_batches(
    requests: Sequence[Request], budget: KvBudget, model: ModelSpec
) -> BatchPlan:
    """Greedily pack requests, in order, into the largest KV-feasible batches.

    A batch reserves bytes for the sum of its inputs plus, for every member,
    the batch's longest output. A request that cannot fit even alone is an
    error naming the request.
    """
    per_token = kv_bytes_per_token(model)
    batches: list[tuple[int, int]] = []
    start = 0
    n = len(requests)
    while start < n:
        input_sum = 0
        max_output = 0
        stop = start
        while stop < n:
            candidate_inputs = input_sum + requests[stop].input_len
            candidate_max_o = max(max_output, requests[stop].output_len)
            width = stop - start + 1
            reserved = per_token * candidate_inputs + width * per_token * candidate_max_o
            if reserved > budget.total_bytes:
                break
            input_sum = candidate_inputs
            max_output = candidate_max_o
            stop += 1
        if stop == start:
            r = requests[start]
            raise InfeasibleRequestError(
                f"request {r.id!r} needs {per_token * (r.input_len + r.output_len):.0f} KV bytes alone, "
                f"budget is {budget.total_bytes:.0f}",
                request_id=r.id,
            )
        batches.append((start, stop))
        start = stop
    return BatchPlan(batches=tuple(batches))


def estimate_batch_time(batch: Sequence[Request], params: LatencyParams) -> float:
    """Prefill plus decode seconds for one static batch.

    Times use the batch's longest input and longest output, the lengths the
    linear models are defined over; the per-member sums only matter for memory.
    """
    if not batch:
        raise SpecError("cannot time an empty batch")
    b = len(batch)
    max_i = max(r.input_len for r in batch)
    max_o = max(r.output_len for r in batch)
    return prefill_time(params, b, max_i) + decode_time(params, b, max_i, max_o)


def time_batches(plan: BatchPlan, requests: Sequence[Request], params: LatencyParams) -> BatchPlan:
    times = tuple(estimate_batch_time(requests[s:e], params) for s, e in plan.batches)
    return replace(plan, per_batch_time=times)


def estimate_instance_throughput(
    requests: Sequence[Request],
    budget: KvBudget,
    model: ModelSpec,
    params: LatencyParams,
) -> float:
    """Tokens per second one instance sustains over the sample trace."""
    plan = time_batches(plan_static_batches(requests, budget, model), requests, params)
    token_count = sum(r.input_len + r.output_len for r in requests)
    return token_count / plan.total_time


@dataclass(frozen=True)
class MachineEstimate:
    """One machine's share of a configuration's estimated throughput."""

    machine: str
    tp_degree: int
    instance_count: int
    instance_tokens_per_sec: float
    machine_tokens_per_sec: float
    budget_bytes: float
    slack_bytes: float


@dataclass(frozen=True)
class ThroughputEstimate:
    """System estimate for one deployment configuration."""

    config: DeploymentConfig
    per_machine: tuple[MachineEstimate, ...]
    system_tokens_per_sec: float


def estimate_system_throughput(
    cluster: ClusterSpec,
    config: DeploymentConfig,
    requests: Sequence[Request],
    params_by_machine_tp: Mapping[tuple[str, int], LatencyParams],
) -> ThroughputEstimate:
    """Sum per-machine contributions: instance rate times instance count."""
    per_machine = []
    total = 0.0
    for placement in config.per_machine:
        machine = cluster.machine(placement.machine)
        budget = kv_budget(machine, placement.tp_degree, cluster.model, cluster.engine)
        verdict = check_memory_constraint(budget, cluster.limits, cluster.model)
        if not verdict.feasible:
            raise InfeasibleConfigError(
                f"machine {machine.name!r} at tp={placement.tp_degree}: KV budget "
                f"{budget.total_bytes:.0f} bytes is short by {-verdict.slack_bytes:.0f} "
                f"for one maximal request",
                machine=machine.name,
                slack_bytes=verdict.slack_bytes,
            )
        key = (machine.name, placement.tp_degree)
        if key not in params_by_machine_tp:
            raise SpecError(f"no fitted parameters for machine {machine.name!r} at tp={placement.tp_degree}")
        rate = estimate_instance_throughput(requests, budget, cluster.model, params_by_machine_tp[key])
        contribution = rate * placement.instance_count
        per_machine.append(
            MachineEstimate(
                machine=machine.name,
                tp_degree=placement.tp_degree,
                instance_count=placement.instance_count,
                instance_tokens_per_sec=rate,
                machine_tokens_per_sec=contribution,
                budget_bytes=budget.total_bytes,
                slack_bytes=verdict.slack_bytes,
            )
        )
        total += contribution
    return ThroughputEstimate(config=config, per_machine=tuple(per_machine), system_tokens_per_sec=total)


@dataclass(frozen=True)
class SearchOutcome:
    """Exhaustive search result: feasible configs ranked best-first, plus failures."""

    ranked: tuple[ThroughputEstimate, ...]
    infeasible: tuple[tuple[DeploymentConfig, str], ...]

    @property
    def best(self) -> ThroughputEstimate:
        if not self.ranked:
            raise InfeasibleConfigError("no feasible deployment configuration", machine="*", slack_bytes=0.0)
        return self.ranked[0]

    @property
    def candidates_visited(self) -> int:
        return len(self.ranked) + len(self.infeasible)


def search_optimal_config(
    cluster: ClusterSpec,
    requests: Sequence[Request],
    params_by_machine_tp: Mapping[tuple[str, int], LatencyParams],
) -> SearchOutcome:
    """Evaluate every combination of per-machine tensor-parallel degrees.

    Machines contribute independently, so the best configuration is the
    per-machine argmax; the full product is still enumerated and reported so
    the ranking (and each rejection reason) is visible.
    """
    degree_lists = [enumerate_tp_degrees(m) for m in cluster.machines]
    ranked: list[ThroughputEstimate] = []
    infeasible: list[tuple[DeploymentConfig, str]] = []
    for combo in product(*degree_lists):
        config = DeploymentConfig(
            per_machine=tuple(
                MachinePlacement(machine=m.name, tp_degree=t, instance_count=m.accelerator_count // t)
                for m, t in zip(cluster.machines, combo)
            )
        )
        try:
            ranked.append(estimate_system_throughput(cluster, config, requests, params_by_machine_tp))
        except (InfeasibleConfigError, InfeasibleRequestError, SpecError) as exc:
            infeasible.append((config, str(exc)))
    ranked.sort(key=lambda e: (-e.system_tokens_per_sec, tuple(p.tp_degree for p in e.config.per_machine)))
    return SearchOutcome(ranked=tuple(ranked), infeasible=tuple(infeasible))
