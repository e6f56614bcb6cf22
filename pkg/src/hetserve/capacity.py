"""KV-cache memory accounting.

An instance's budget is what remains of its accelerators' usable memory after
the engine's static overhead and the model weights. Budgets are kept signed so
callers can report *why* a placement is infeasible instead of clamping to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import EngineOverheads, MachineSpec, ModelSpec, WorkloadLimits
from .errors import SpecError

__all__ = [
    "KvBudget",
    "RunningTokens",
    "FeasibilityVerdict",
    "kv_bytes_per_token",
    "kv_budget",
    "check_memory_constraint",
    "kv_usage",
]


@dataclass(frozen=True)
class KvBudget:
    """Bytes available for request KV state on one instance (may be <= 0)."""

    total_bytes: float


@dataclass
class RunningTokens:
    """Live token sums for the unfinished requests on one instance.

    Incremented at dispatch and decremented exactly once at completion; the
    scheduler owns and serializes all mutation.
    """

    input_sum: int = 0
    predicted_output_sum: int = 0

    def add(self, input_len: int, predicted_output_len: int) -> None:
        self.input_sum += input_len
        self.predicted_output_sum += predicted_output_len

    def remove(self, input_len: int, predicted_output_len: int) -> None:
        self.input_sum -= input_len
        self.predicted_output_sum -= predicted_output_len
        if self.input_sum < 0 or self.predicted_output_sum < 0:
            raise SpecError("running token sums went negative; completion applied twice?")

    def total(self) -> int:
        return self.input_sum + self.predicted_output_sum


@dataclass(frozen=True)
class FeasibilityVerdict:
    """Outcome of the per-instance memory constraint check."""

    feasible: bool
    required_bytes: float
    slack_bytes: float


def kv_bytes_per_token(model: ModelSpec) -> int:
    """KV bytes stored per token: key and value vectors across every layer."""
    return 2 * model.layers * model.hidden_dim * model.bytes_per_param


def kv_budget(
    machine: MachineSpec,
    tp_degree: int,
    model: ModelSpec,
    overheads: EngineOverheads,
) -> KvBudget:
    """KV budget of one instance spanning ``tp_degree`` accelerators of ``machine``."""
    if tp_degree < 1 or machine.accelerator_count % tp_degree != 0:
        raise SpecError(
            f"tp degree {tp_degree} does not divide machine {machine.name!r}'s "
            f"accelerator count {machine.accelerator_count}"
        )
    usable = tp_degree * machine.accelerator_mem_bytes * overheads.mem_utilization_fraction
    weights = model.param_count * model.bytes_per_param
    return KvBudget(total_bytes=usable - overheads.static_overhead_bytes - weights)


def check_memory_constraint(
    budget: KvBudget, limits: WorkloadLimits, model: ModelSpec
) -> FeasibilityVerdict:
    """An instance is deployable iff its budget holds one maximal request's KV."""
    required = kv_bytes_per_token(model) * (limits.max_input_len + limits.max_output_len)
    slack = budget.total_bytes - required
    return FeasibilityVerdict(feasible=slack >= 0, required_bytes=required, slack_bytes=slack)


def kv_usage(running: RunningTokens, model: ModelSpec, budget: KvBudget) -> float:
    """Fraction of the KV budget claimed by running inputs plus predicted outputs.

    Deliberately unclamped: values above 1 signal over-subscription (queued
    work beyond what the cache can hold at once).
    """
    if budget.total_bytes <= 0:
        raise SpecError(f"kv_usage needs a positive budget, got {budget.total_bytes}")
    return kv_bytes_per_token(model) * running.total() / budget.total_bytes
