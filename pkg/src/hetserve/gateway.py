"""Scheduling gateway: a JSON-over-HTTP front door for a set of backends.

Every submitted request is priced by the scheduler, committed under one
critical section (prediction, choice, bookkeeping), forwarded to the chosen
backend, and unwound by the completion hook when the backend responds. The
gateway adds no policy of its own; its decisions are exactly the library
scheduler's. A backend failure rolls the workload back and retries once on
the next-best healthy instance.
"""

from __future__ import annotations

import asyncio
import contextlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx
import yaml
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .capacity import kv_budget, check_memory_constraint
from .core import ClusterSpec, Request, parse_cluster_spec
from .errors import SpecError
from .latency import LatencyParams, read_params_file
from .scheduling import InstanceHandle, OutputLengthPredictor, PolicyConfig, Scheduler
from .simulator import policy_from_mapping

__all__ = [
    "BackendConfig",
    "GatewayConfig",
    "load_gateway_config",
    "build_backend_handles",
    "build_gateway",
]


@dataclass(frozen=True)
class BackendConfig:
    """One backend entry from the gateway config file."""

    id: str
    addr: str
    machine: str
    tp_degree: int


@dataclass(frozen=True)
class GatewayConfig:
    listen_addr: str
    backends: tuple[BackendConfig, ...]
    policy: PolicyConfig
    spec_path: str
    params_path: str
    log_level: str = "info"


def load_gateway_config(path: str | Path) -> GatewayConfig:
    """Parse the gateway config file; HETSERVE_ADDR / HETSERVE_LOG_LEVEL override."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"gateway config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError(f"gateway config {path}: expected a mapping document")
    backends_node = doc.get("backends")
    if not isinstance(backends_node, list) or not backends_node:
        raise SpecError("gateway config needs a non-empty 'backends' list")
    backends = []
    for i, node in enumerate(backends_node):
        if not isinstance(node, dict):
            raise SpecError(f"backends[{i}] must be a mapping")
        try:
            backends.append(
                BackendConfig(
                    id=str(node["id"]),
                    addr=str(node["addr"]),
                    machine=str(node["machine"]),
                    tp_degree=int(node["tp"]),
                )
            )
        except KeyError as exc:
            raise SpecError(f"backends[{i}] is missing field {exc.args[0]!r}") from exc
    base = path.parent
    for key in ("spec", "params"):
        if key not in doc:
            raise SpecError(f"gateway config {path}: missing {key!r}")
    return GatewayConfig(
        listen_addr=os.environ.get("HETSERVE_ADDR", str(doc.get("listen_addr", "127.0.0.1:8800"))),
        backends=tuple(backends),
        policy=policy_from_mapping(doc.get("policy", {})),
        spec_path=str(base / str(doc["spec"])),
        params_path=str(base / str(doc["params"])),
        log_level=os.environ.get("HETSERVE_LOG_LEVEL", str(doc.get("log_level", "info"))),
    )


def build_backend_handles(
    cluster: ClusterSpec,
    params: dict[tuple[str, int], LatencyParams],
    backends: tuple[BackendConfig, ...],
) -> list[InstanceHandle]:
    """One scheduler handle per configured backend; memory constraint enforced."""
    handles = []
    for cfg in backends:
        machine = cluster.machine(cfg.machine)
        budget = kv_budget(machine, cfg.tp_degree, cluster.model, cluster.engine)
        verdict = check_memory_constraint(budget, cluster.limits, cluster.model)
        if not verdict.feasible:
            raise SpecError(
                f"backend {cfg.id!r} ({cfg.machine} tp={cfg.tp_degree}) fails the memory "
                f"constraint by {-verdict.slack_bytes:.0f} bytes"
            )
        key = (cfg.machine, cfg.tp_degree)
        if key not in params:
            raise SpecError(f"no fitted parameters for backend {cfg.id!r} ({key})")
        handles.append(
            InstanceHandle(
                id=cfg.id,
                machine=cfg.machine,
                tp_degree=cfg.tp_degree,
                params=params[key],
                budget=budget,
            )
        )
    return handles


class _SubmitBody(BaseModel):
    id: str
    input_len: int
    output_len: int | None = None


@dataclass
class _BackendRuntime:
    config: BackendConfig
    client: httpx.AsyncClient
    health: str = "up"


class _GatewayState:
    """All mutable gateway state; one lock serializes commits and snapshots."""

    def __init__(self, scheduler: Scheduler, predictor: OutputLengthPredictor, backends: list[_BackendRuntime]):
        self.scheduler = scheduler
        self.predictor = predictor
        self.backends = backends
        self.lock = threading.Lock()
        self.records: dict[str, dict] = {}
        self.dispatched = 0
        self.completed = 0
        self.failed = 0
        self.completed_tokens = 0
        self.start_wall = time.monotonic()

    def healthy_indexes(self) -> set[int]:
        return {i for i, b in enumerate(self.backends) if b.health == "up"}


def build_gateway(
    cluster: ClusterSpec,
    params: dict[tuple[str, int], LatencyParams],
    backends: tuple[BackendConfig, ...],
    policy: PolicyConfig,
    transport_for: Callable[[BackendConfig], httpx.AsyncBaseTransport] | None = None,
) -> FastAPI:
    """Assemble the gateway app. ``transport_for`` lets tests route backend
    traffic in-process instead of over sockets."""
    handles = build_backend_handles(cluster, params, backends)
    scheduler = Scheduler(handles, cluster.model, policy)
    predictor = OutputLengthPredictor(policy.predictor, cluster.limits.max_output_len)

    runtimes = [
        _BackendRuntime(
            config=cfg,
            client=httpx.AsyncClient(
                base_url=cfg.addr,
                timeout=None,
                transport=transport_for(cfg) if transport_for else None,
            ),
        )
        for cfg in backends
    ]
    state = _GatewayState(scheduler, predictor, runtimes)

    @contextlib.asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        await asyncio.gather(*(b.client.aclose() for b in runtimes), return_exceptions=True)

    app = FastAPI(lifespan=lifespan)
    app.state.gateway = state

    def _commit_dispatch(request: Request, exclude: set[int]) -> int:
        with state.lock:
            healthy = state.healthy_indexes() - exclude
            if not healthy:
                raise HTTPException(status_code=503, detail="no healthy backend available")
            chosen = state.scheduler.choose(request, allowed=healthy)
            state.dispatched += 1
            state.records[request.id] = {
                "instance": state.backends[chosen].config.id,
                "dispatch_wall": time.monotonic(),
                "status": "in-flight",
            }
            return chosen

    def _rollback(request_id: str, chosen: int, transport_down: bool) -> None:
        # Connection-level failures mark the backend down; an HTTP error from
        # a live backend only fails this dispatch.
        with state.lock:
            state.scheduler.complete(request_id)
            if transport_down:
                state.backends[chosen].health = "down"

    async def _forward(chosen: int, request: Request, output_len: int) -> dict:
        backend = state.backends[chosen]
        response = await backend.client.post(
            "/generate",
            json={"id": request.id, "input_len": request.input_len, "output_len": output_len},
        )
        response.raise_for_status()
        return response.json()

    def _mark_failed(request_id: str) -> None:
        with state.lock:
            state.records[request_id]["status"] = "failed"
            state.failed += 1

    @app.post("/v1/requests")
    async def submit(body: _SubmitBody):
        if body.input_len < 1 or (body.output_len is not None and body.output_len < 1):
            raise HTTPException(status_code=422, detail="lengths must be >= 1")
        if policy.predictor.mode == "oracle" and body.output_len is None:
            raise HTTPException(status_code=422, detail="oracle predictor requires output_len")
        started = time.monotonic()
        with state.lock:
            if body.id in state.records:
                raise HTTPException(status_code=409, detail=f"request id {body.id!r} already seen")
            healthy = state.healthy_indexes()
            if not healthy:
                raise HTTPException(status_code=503, detail="no healthy backend available")
            # Prediction happens inside the critical section so the draw order
            # matches the decision order under concurrent submissions.
            probe = Request(
                id=body.id,
                input_len=body.input_len,
                output_len=body.output_len or 1,
                predicted_output_len=1,
            )
            predicted = state.predictor.predict(probe)
            true_output = body.output_len if body.output_len is not None else predicted
            request = Request(
                id=body.id,
                input_len=body.input_len,
                output_len=true_output,
                predicted_output_len=predicted,
            )
            chosen = state.scheduler.choose(request, allowed=healthy)
            state.dispatched += 1
            state.records[body.id] = {
                "instance": state.backends[chosen].config.id,
                "dispatch_wall": started,
                "status": "in-flight",
            }

        tried: set[int] = set()
        while True:
            try:
                result = await _forward(chosen, request, true_output)
                break
            except httpx.HTTPError as exc:
                tried.add(chosen)
                _rollback(request.id, chosen, transport_down=isinstance(exc, httpx.TransportError))
                if len(tried) >= 2:
                    _mark_failed(request.id)
                    raise HTTPException(
                        status_code=502, detail=f"request {request.id!r} failed on two backends"
                    ) from None
                try:
                    chosen = _commit_dispatch(request, exclude=tried)
                except HTTPException:
                    _mark_failed(request.id)
                    raise HTTPException(
                        status_code=502, detail=f"backend failed and no retry target for {request.id!r}"
                    ) from None

        with state.lock:
            state.scheduler.complete(request.id)
            state.records[request.id]["status"] = "completed"
            state.completed += 1
            state.completed_tokens += request.input_len + true_output
        return {
            "instance": state.backends[chosen].config.id,
            "completion": {
                "latency_s": time.monotonic() - started,
                "tokens": result.get("tokens", request.input_len + true_output),
            },
        }

    @app.get("/v1/metrics")
    async def metrics():
        with state.lock:
            snap = state.scheduler.snapshot()
            elapsed = time.monotonic() - state.start_wall
            return {
                "inst_loads": snap["loads"],
                "kv_usage": snap["kv_usage"],
                "in_flight": snap["in_flight"],
                "dispatched": state.dispatched,
                "completed": state.completed,
                "failed": state.failed,
                "cumulative_tokens": state.completed_tokens,
                "throughput_tokens_per_sec": state.completed_tokens / elapsed if elapsed > 0 else 0.0,
                "uptime_s": elapsed,
            }

    @app.get("/v1/instances")
    async def instances():
        with state.lock:
            return [
                {
                    "id": b.config.id,
                    "machine": b.config.machine,
                    "tp_degree": b.config.tp_degree,
                    "addr": b.config.addr,
                    "health": b.health,
                    "budget_bytes": state.scheduler.instances[i].budget.total_bytes,
                }
                for i, b in enumerate(state.backends)
            ]

    return app


def build_gateway_from_config(
    config: GatewayConfig,
    transport_for: Callable[[BackendConfig], httpx.AsyncBaseTransport] | None = None,
) -> FastAPI:
    cluster = parse_cluster_spec(Path(config.spec_path).read_text())
    params = read_params_file(Path(config.params_path).read_text())
    return build_gateway(cluster, params, config.backends, config.policy, transport_for=transport_for)
