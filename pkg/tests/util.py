"""Shared builders for the test suite."""

from __future__ import annotations

from hetserve import (
    ClusterSpec,
    EngineOverheads,
    LatencyParams,
    MachineSpec,
    ModelSpec,
    Request,
    WorkloadLimits,
)


def req(rid: str, input_len: int, output_len: int, predicted: int | None = None) -> Request:
    return Request(
        id=rid,
        input_len=input_len,
        output_len=output_len,
        predicted_output_len=predicted if predicted is not None else output_len,
    )


def params_from(*values: float) -> LatencyParams:
    """LatencyParams from up to 8 values, zero-padded."""
    padded = list(values) + [0.0] * (8 - len(values))
    return LatencyParams(*padded)


# Matches the FP16 8B-parameter deployment the derived examples are based on:
# 2 * 32 * 4096 * 2 = 524288 KV bytes per token.
MODEL_8B = ModelSpec(layers=32, hidden_dim=4096, param_count=8_000_000_000, bytes_per_param=2)
TINY_MODEL = ModelSpec(layers=2, hidden_dim=4, param_count=100, bytes_per_param=2)
OVERHEADS = EngineOverheads(mem_utilization_fraction=0.9, static_overhead_bytes=2_000_000_000)


def small_cluster(
    accelerators: int = 8,
    mem_bytes: int = 32_000_000_000,
    max_input: int = 4096,
    max_output: int = 4096,
) -> ClusterSpec:
    return ClusterSpec(
        model=MODEL_8B,
        engine=OVERHEADS,
        machines=(
            MachineSpec(
                name="m0",
                accelerator_count=accelerators,
                accelerator_mem_bytes=mem_bytes,
                accelerator_type="test",
            ),
        ),
        limits=WorkloadLimits(max_input_len=max_input, max_output_len=max_output),
    )
