"""Mock inference backend: replays the fitted latency model in scaled wall time.

The serving loop is the continuous-batching loop of the simulator, driven by
the wall clock: each iteration's model cost (times ``time_scale``) is paced
against a deadline so sleep overhead does not accumulate. Requests block on
POST /generate until their simulated departure. An idle backend parks on a
condition variable (no busy-wait).
"""

from __future__ import annotations

import asyncio
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .capacity import KvBudget, kv_bytes_per_token
from .core import ModelSpec, Request
from .errors import SpecError
from .latency import LatencyParams, decode_iteration_time, prefill_time

__all__ = ["MockBackend", "build_mock_backend_app"]


@dataclass
class _Pending:
    req: Request
    future: asyncio.Future
    loop: asyncio.AbstractEventLoop
    arrival_sim: float
    generated: int = 0


class MockBackend:
    """Continuous-batching executor over one instance's params and KV budget."""

    def __init__(
        self,
        params: LatencyParams,
        budget: KvBudget,
        model: ModelSpec,
        time_scale: float = 1.0,
        start_paused: bool = False,
    ):
        if time_scale <= 0:
            raise SpecError(f"time_scale must be > 0, got {time_scale}")
        if budget.total_bytes <= 0:
            raise SpecError("mock backend needs a positive KV budget")
        self._params = params
        self._budget = budget
        self._per_token = kv_bytes_per_token(model)
        self._time_scale = time_scale
        self._cond = threading.Condition()
        self._queue: list[_Pending] = []
        self._active: list[_Pending] = []
        self._reserved_tokens = 0
        self._sim_clock = 0.0
        self._paused = start_paused
        self._stopped = False
        self._wall_anchor: float | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def submit(self, req: Request, future: asyncio.Future, loop: asyncio.AbstractEventLoop) -> None:
        if self._per_token * (req.input_len + req.output_len) > self._budget.total_bytes:
            raise SpecError(
                f"request {req.id!r} exceeds the KV budget of this backend and can never be admitted"
            )
        with self._cond:
            self._queue.append(_Pending(req=req, future=future, loop=loop, arrival_sim=self._sim_clock))
            self._cond.notify_all()

    def resume(self) -> None:
        with self._cond:
            self._paused = False
            self._wall_anchor = None
            self._cond.notify_all()

    def pause(self) -> None:
        with self._cond:
            self._paused = True

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        self._thread.join(timeout=5)

    def snapshot(self) -> dict:
        with self._cond:
            return {
                "queued": len(self._queue),
                "active": len(self._active),
                "sim_clock": self._sim_clock,
                "paused": self._paused,
            }

    # worker ---------------------------------------------------------------

    def _resolve(self, pending: _Pending, depart_sim: float) -> None:
        payload = {
            "id": pending.req.id,
            "tokens": pending.req.input_len + pending.req.output_len,
            "sim_latency_s": depart_sim - pending.arrival_sim,
        }

        def _set(fut=pending.future, value=payload):
            if not fut.done():
                fut.set_result(value)

        pending.loop.call_soon_threadsafe(_set)

    def _admit_locked(self) -> list[_Pending]:
        newly = []
        while self._queue:
            head = self._queue[0]
            need = head.req.input_len + head.req.output_len
            if self._per_token * (self._reserved_tokens + need) > self._budget.total_bytes:
                break
            self._queue.pop(0)
            self._reserved_tokens += need
            newly.append(head)
        return newly

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._stopped and (self._paused or (not self._queue and not self._active)):
                    self._cond.wait()
                if self._stopped:
                    for p in self._queue + self._active:
                        self._resolve(p, self._sim_clock)
                    return
                for p in [p for p in self._active if p.generated >= p.req.output_len]:
                    self._active.remove(p)
                    self._reserved_tokens -= p.req.input_len + p.req.output_len
                    self._resolve(p, self._sim_clock)
                newly = self._admit_locked()
                if not self._active and not newly:
                    continue
                cost = 0.0
                if newly:
                    cost += prefill_time(self._params, len(newly), max(p.req.input_len for p in newly))
                    self._active.extend(newly)
                cached = max(p.req.input_len + p.generated + 1 for p in self._active)
                cost += decode_iteration_time(self._params, cached, len(self._active))
                for p in self._active:
                    p.generated += 1
                self._sim_clock += cost
                if self._wall_anchor is None:
                    self._wall_anchor = time.monotonic() - (self._sim_clock - cost) * self._time_scale
                deadline = self._wall_anchor + self._sim_clock * self._time_scale
            # Pace outside the lock so submissions are never blocked by sleeps.
            delay = deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)


class _GenerateBody(BaseModel):
    id: str
    input_len: int
    output_len: int


class _ControlBody(BaseModel):
    action: str


def build_mock_backend_app(backend: MockBackend) -> FastAPI:
    """HTTP surface: POST /generate blocks until the simulated departure."""
    app = FastAPI()

    @app.post("/generate")
    async def generate(body: _GenerateBody):
        if body.input_len < 1 or body.output_len < 1:
            raise HTTPException(status_code=422, detail="lengths must be >= 1")
        req = Request(
            id=body.id,
            input_len=body.input_len,
            output_len=body.output_len,
            predicted_output_len=body.output_len,
        )
        loop = asyncio.get_running_loop()
        future: asyncio.Future = loop.create_future()
        try:
            backend.submit(req, future, loop)
        except SpecError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return await future

    @app.post("/control")
    async def control(body: _ControlBody):
        if body.action == "resume":
            backend.resume()
        elif body.action == "pause":
            backend.pause()
        else:
            raise HTTPException(status_code=422, detail=f"unknown action {body.action!r}")
        return {"status": "ok", **backend.snapshot()}

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", **backend.snapshot()}

    return app
