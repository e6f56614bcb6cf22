"""Runtime request scheduling across instances of unequal capability.

Each request is priced per instance: how long would a KV-budget-filling batch
of identical copies take, divided by the batch size, then amplified by an
exponential in the instance's current KV pressure. The mapper assigns the
request so the maximum accumulated workload across instances is minimized,
and a completion hook later subtracts exactly the recorded contribution.

Baseline policies (round robin, weighted round robin, single instance, and a
memory-only variant) share the same bookkeeping so their balance can be
compared on equal footing.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .capacity import KvBudget, RunningTokens, kv_bytes_per_token, kv_usage
from .core import ModelSpec, Request, WorkloadLimits
from .errors import SchedulingError, SpecError
from .latency import LatencyParams, decode_time, prefill_time

__all__ = [
    "POLICIES",
    "InstanceHandle",
    "PredictorConfig",
    "OutputLengthPredictor",
    "PolicyConfig",
    "ideal_batch_size",
    "request_oversized",
    "per_request_cost",
    "workload",
    "InstanceState",
    "Scheduler",
]

POLICIES = ("OS", "RR", "WRR", "SI", "MB")


@dataclass(frozen=True)
class InstanceHandle:
    """A schedulable instance: identity, capability model, and KV budget."""

    id: str
    machine: str
    tp_degree: int
    params: LatencyParams
    budget: KvBudget


@dataclass(frozen=True)
class PredictorConfig:
    """Output-length predictor settings: oracle, fixed mean, or normal sampling."""

    mode: str = "oracle"
    mean: float | None = None
    stddev: float | None = None
    seed: int | None = None


class OutputLengthPredictor:
    """Predicts a request's output length before scheduling.

    The normal mode draws round(N(mean, stddev)) clamped to [1, max_output],
    one draw per request in call order, from a seeded generator.
    """

    def __init__(self, config: PredictorConfig, max_output_len: int):
        if config.mode not in ("oracle", "mean", "normal"):
            raise SpecError(f"unknown predictor mode {config.mode!r}")
        if config.mode in ("mean", "normal") and config.mean is None:
            raise SpecError(f"predictor mode {config.mode!r} requires a mean")
        if config.mode == "normal" and config.stddev is None:
            raise SpecError("normal predictor requires a stddev")
        self._config = config
        self._max_output_len = max_output_len
        self._rng = np.random.default_rng(config.seed)

    @classmethod
    def from_config(cls, config: PredictorConfig, limits: WorkloadLimits) -> "OutputLengthPredictor":
        return cls(config, limits.max_output_len)

    def predict(self, request: Request) -> int:
        mode = self._config.mode
        if mode == "oracle":
            return request.output_len
        if mode == "mean":
            value = round(self._config.mean)
        else:
            value = round(self._rng.normal(self._config.mean, self._config.stddev))
        return int(min(max(value, 1), self._max_output_len))


@dataclass(frozen=True)
class PolicyConfig:
    """Scheduling policy record: policy name, pressure exponent, and predictor."""

    policy: str = "OS"
    theta: float = 2.0
    wrr_weights: tuple[float, ...] | None = None
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise SpecError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.theta <= 0:
            raise SpecError(f"theta must be > 0, got {self.theta}")
        if self.policy == "WRR":
            if not self.wrr_weights:
                raise SpecError("WRR requires wrr_weights")
            if any(w <= 0 for w in self.wrr_weights):
                raise SpecError("wrr_weights must all be positive")


def ideal_batch_size(request: Request, budget: KvBudget, model: ModelSpec) -> int:
    """How many copies of this request would fill the instance's KV budget.

    Floored to 1 so an oversized request stays schedulable; callers can use
    request_oversized() to surface a diagnostic for that case.
    """
    if budget.total_bytes <= 0:
        raise SpecError(f"ideal_batch_size needs a positive budget, got {budget.total_bytes}")
    per_request = kv_bytes_per_token(model) * (request.input_len + request.predicted_output_len)
    return max(1, int(budget.total_bytes // per_request))


def request_oversized(request: Request, budget: KvBudget, model: ModelSpec) -> bool:
    per_request = kv_bytes_per_token(model) * (request.input_len + request.predicted_output_len)
    return per_request > budget.total_bytes


def per_request_cost(params: LatencyParams, request: Request, batch_size: int) -> float:
    """Seconds of instance time one request claims, amortized over its ideal batch."""
    if batch_size < 1:
        raise SpecError(f"batch_size must be >= 1, got {batch_size}")
    total = prefill_time(params, batch_size, request.input_len) + decode_time(
        params, batch_size, request.input_len, request.predicted_output_len
    )
    if total <= 0:
        raise SpecError(
            f"non-positive batch time {total} for request {request.id!r}; latency parameters are corrupt"
        )
    return total / batch_size


def workload(cost: float, usage: float, theta: float) -> float:
    """Per-request workload: cost amplified exponentially by KV pressure."""
    if theta <= 0:
        raise SpecError(f"theta must be > 0, got {theta}")
    return cost * math.exp(theta * usage)


@dataclass
class InstanceState:
    """Live bookkeeping for one instance inside the scheduler."""

    handle: InstanceHandle
    load: float = 0.0
    running: RunningTokens = field(default_factory=RunningTokens)
    oversized_count: int = 0


@dataclass(frozen=True)
class _InFlight:
    instance_index: int
    load_delta: float
    input_len: int
    predicted_output_len: int


class Scheduler:
    """Maps requests to instances and unwinds their contribution on completion.

    choose()/complete() form the serialized critical section: decisions are
    taken one at a time, completions may arrive from any thread, and each
    completion subtracts the values recorded at dispatch (never recomputed,
    so bookkeeping errors cannot accumulate).
    """

    def __init__(
        self,
        instances: list[InstanceHandle],
        model: ModelSpec,
        policy: PolicyConfig | None = None,
    ):
        if not instances:
            raise SchedulingError("scheduler needs at least one instance")
        policy = policy or PolicyConfig()
        if policy.policy == "WRR" and len(policy.wrr_weights) != len(instances):
            raise SpecError(
                f"WRR needs one weight per instance ({len(instances)}), got {len(policy.wrr_weights)}"
            )
        for handle in instances:
            if handle.budget.total_bytes <= 0:
                raise SpecError(f"instance {handle.id!r} has a non-positive KV budget")
        self._model = model
        self._policy = policy
        self._states = [InstanceState(handle=h) for h in instances]
        self._in_flight: dict[str, _InFlight] = {}
        self._lock = threading.Lock()
        self._rr_next = 0
        self._wrr_current = [0.0] * len(instances)

    @property
    def instances(self) -> list[InstanceHandle]:
        return [s.handle for s in self._states]

    @property
    def policy(self) -> PolicyConfig:
        return self._policy

    def evaluate(self, request: Request, allowed: set[int] | None = None) -> list[float]:
        """Per-instance workload of this request (no state change).

        Disallowed instances get +inf so they can never win the mapping.
        """
        weights = []
        for idx, state in enumerate(self._states):
            if allowed is not None and idx not in allowed:
                weights.append(math.inf)
                continue
            if self._policy.policy == "MB":
                cost = 1.0
            else:
                b = ideal_batch_size(request, state.handle.budget, self._model)
                cost = per_request_cost(state.handle.params, request, b)
            usage = kv_usage(state.running, self._model, state.handle.budget)
            weights.append(workload(cost, usage, self._policy.theta))
        return weights

    def choose(self, request: Request, allowed: set[int] | None = None) -> int:
        """Pick an instance for the request and commit the dispatch bookkeeping."""
        with self._lock:
            candidates = self._candidates(allowed)
            if request.id in self._in_flight:
                raise SchedulingError(f"request {request.id!r} is already in flight")
            policy = self._policy.policy
            if policy in ("OS", "MB"):
                weights = self.evaluate(request, allowed)
                chosen = self._min_max_choice(weights)
            else:
                if policy == "SI":
                    chosen = 0 if 0 in candidates else candidates[0]
                elif policy == "RR":
                    chosen = self._next_round_robin(candidates)
                else:  # WRR
                    chosen = self._next_weighted(candidates)
                weights = self.evaluate(request, allowed={chosen})
            self._commit(request, chosen, weights[chosen])
            return chosen

    def complete(self, request_id: str) -> None:
        """Fire the completion hook: subtract exactly what dispatch recorded."""
        with self._lock:
            entry = self._in_flight.pop(request_id, None)
            if entry is None:
                raise SchedulingError(f"request {request_id!r} is not in flight (double completion?)")
            state = self._states[entry.instance_index]
            state.load -= entry.load_delta
            state.running.remove(entry.input_len, entry.predicted_output_len)

    def in_flight_count(self) -> int:
        with self._lock:
            return len(self._in_flight)

    def snapshot(self) -> dict:
        """Consistent view of loads, KV usage, and in-flight work per instance."""
        with self._lock:
            return {
                "loads": {s.handle.id: s.load for s in self._states},
                "kv_usage": {
                    s.handle.id: kv_usage(s.running, self._model, s.handle.budget) for s in self._states
                },
                "running_tokens": {s.handle.id: s.running.total() for s in self._states},
                "oversized": {s.handle.id: s.oversized_count for s in self._states},
                "in_flight": len(self._in_flight),
            }

    def loads(self) -> list[float]:
        with self._lock:
            return [s.load for s in self._states]

    def running_totals(self) -> list[int]:
        with self._lock:
            return [s.running.total() for s in self._states]

    # internals ------------------------------------------------------------

    def _candidates(self, allowed: set[int] | None) -> list[int]:
        candidates = [i for i in range(len(self._states)) if allowed is None or i in allowed]
        if not candidates:
            raise SchedulingError("no instance available for scheduling")
        return candidates

    def _min_max_choice(self, weights: list[float]) -> int:
        loads = [s.load for s in self._states]
        best_idx = -1
        best_peak = math.inf
        for idx, w in enumerate(weights):
            if math.isinf(w):
                continue
            peak = max(l + (w if j == idx else 0.0) for j, l in enumerate(loads))
            if peak < best_peak:
                best_peak = peak
                best_idx = idx
        if best_idx < 0:
            raise SchedulingError("no instance available for scheduling")
        return best_idx

    def _next_round_robin(self, candidates: list[int]) -> int:
        # Strict cycle over all instance indexes, skipping disallowed ones.
        for _ in range(len(self._states)):
            idx = self._rr_next % len(self._states)
            self._rr_next += 1
            if idx in candidates:
                return idx
        return candidates[0]

    def _next_weighted(self, candidates: list[int]) -> int:
        # Smooth weighted round robin: honors the weight ratio over any window.
        weights = self._policy.wrr_weights
        total = sum(weights[i] for i in candidates)
        chosen = candidates[0]
        for i in candidates:
            self._wrr_current[i] += weights[i]
            if self._wrr_current[i] > self._wrr_current[chosen]:
                chosen = i
        self._wrr_current[chosen] -= total
        return chosen

    def _commit(self, request: Request, chosen: int, load_delta: float) -> None:
        state = self._states[chosen]
        if request_oversized(request, state.handle.budget, self._model):
            state.oversized_count += 1
        state.load += load_delta
        state.running.add(request.input_len, request.predicted_output_len)
        self._in_flight[request.id] = _InFlight(
            instance_index=chosen,
            load_delta=load_delta,
            input_len=request.input_len,
            predicted_output_len=request.predicted_output_len,
        )
