"""Domain types plus parsers for the cluster-spec and trace file formats.

All memory quantities are plain bytes at API boundaries; spec files may use
suffixed literals ("32 GB", "2 GiB") which are normalized at parse time.
Traces are line-delimited JSON records, one request per line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace

import yaml

from .errors import SpecError, TraceError

__all__ = [
    "ModelSpec",
    "MachineSpec",
    "EngineOverheads",
    "WorkloadLimits",
    "Request",
    "MachinePlacement",
    "DeploymentConfig",
    "ClusterSpec",
    "parse_bytes",
    "parse_cluster_spec",
    "serialize_cluster_spec",
    "parse_trace",
    "serialize_trace",
    "enumerate_tp_degrees",
    "deployment_for",
]


def _require_positive_int(value, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecError(f"{field} must be an integer, got {value!r}")
    if value <= 0:
        raise SpecError(f"{field} must be strictly positive, got {value}")
    return value


@dataclass(frozen=True)
class ModelSpec:
    """Architecture constants of the deployed LLM."""

    layers: int
    hidden_dim: int
    param_count: int
    bytes_per_param: int

    def __post_init__(self):
        for field in ("layers", "hidden_dim", "param_count", "bytes_per_param"):
            _require_positive_int(getattr(self, field), f"model.{field}")


@dataclass(frozen=True)
class MachineSpec:
    """One machine's accelerator inventory. A machine hosts one accelerator type."""

    name: str
    accelerator_count: int
    accelerator_mem_bytes: int
    accelerator_type: str = "generic"

    def __post_init__(self):
        if not self.name:
            raise SpecError("machine.name must be a non-empty string")
        _require_positive_int(self.accelerator_count, f"machine[{self.name}].accelerator_count")
        _require_positive_int(self.accelerator_mem_bytes, f"machine[{self.name}].accelerator_mem_bytes")


@dataclass(frozen=True)
class EngineOverheads:
    """Inference-engine memory behaviour: usable fraction and static overhead."""

    mem_utilization_fraction: float
    static_overhead_bytes: int

    def __post_init__(self):
        f = self.mem_utilization_fraction
        if not (isinstance(f, (int, float)) and 0.0 < float(f) <= 1.0):
            raise SpecError(f"engine.mem_utilization_fraction must be in (0, 1], got {f!r}")
        o = self.static_overhead_bytes
        if isinstance(o, bool) or not isinstance(o, int) or o < 0:
            raise SpecError(f"engine.static_overhead_bytes must be a non-negative integer, got {o!r}")


@dataclass(frozen=True)
class WorkloadLimits:
    """Maximum request input/output lengths the deployment must support."""

    max_input_len: int
    max_output_len: int

    def __post_init__(self):
        _require_positive_int(self.max_input_len, "limits.max_input_len")
        _require_positive_int(self.max_output_len, "limits.max_output_len")


@dataclass(frozen=True)
class Request:
    """One inference request, lengths only.

    ``output_len`` is the ground truth used by the simulator; the scheduler
    only ever sees ``predicted_output_len``.
    """

    id: str
    input_len: int
    output_len: int
    predicted_output_len: int

    def __post_init__(self):
        if not self.id:
            raise SpecError("request.id must be a non-empty string")
        _require_positive_int(self.input_len, f"request[{self.id}].input_len")
        _require_positive_int(self.output_len, f"request[{self.id}].output_len")
        _require_positive_int(self.predicted_output_len, f"request[{self.id}].predicted_output_len")

    def with_prediction(self, predicted: int) -> "Request":
        return replace(self, predicted_output_len=predicted)


@dataclass(frozen=True)
class MachinePlacement:
    """Chosen tensor-parallel degree and resulting instance count on one machine."""

    machine: str
    tp_degree: int
    instance_count: int


@dataclass(frozen=True)
class DeploymentConfig:
    """Per-machine placement choices; every accelerator is used exactly once."""

    per_machine: tuple[MachinePlacement, ...]

    def degree_for(self, machine: str) -> int:
        for entry in self.per_machine:
            if entry.machine == machine:
                return entry.tp_degree
        raise SpecError(f"deployment config has no entry for machine {machine!r}")

    def describe(self) -> str:
        return ", ".join(f"{e.machine}:t{e.tp_degree}x{e.instance_count}" for e in self.per_machine)


@dataclass(frozen=True)
class ClusterSpec:
    """Parsed cluster spec: model, engine overheads, machines, workload limits."""

    model: ModelSpec
    engine: EngineOverheads
    machines: tuple[MachineSpec, ...]
    limits: WorkloadLimits

    def machine(self, name: str) -> MachineSpec:
        for m in self.machines:
            if m.name == name:
                return m
        raise SpecError(f"unknown machine {name!r}")


_SIZE_SUFFIXES = {
    "b": 1,
    "kb": 10**3,
    "mb": 10**6,
    "gb": 10**9,
    "tb": 10**12,
    "kib": 2**10,
    "mib": 2**20,
    "gib": 2**30,
    "tib": 2**40,
}

_SIZE_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?)\s*([a-zA-Z]+)?\s*$")


def parse_bytes(value, field: str) -> int:
    """Normalize a byte quantity (int, integral float, or suffixed string) to int bytes."""
    if isinstance(value, bool):
        raise SpecError(f"{field}: expected a byte count, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise SpecError(f"{field}: byte count must be integral, got {value!r}")
        return int(value)
    if isinstance(value, str):
        m = _SIZE_RE.match(value)
        if not m:
            raise SpecError(f"{field}: cannot parse byte quantity {value!r}")
        magnitude = float(m.group(1))
        suffix = (m.group(2) or "b").lower()
        if suffix not in _SIZE_SUFFIXES:
            raise SpecError(f"{field}: unknown size suffix {m.group(2)!r} in {value!r}")
        total = magnitude * _SIZE_SUFFIXES[suffix]
        if not float(total).is_integer():
            raise SpecError(f"{field}: {value!r} is not a whole number of bytes")
        return int(total)
    raise SpecError(f"{field}: expected a byte count, got {value!r}")


def _as_mapping(node, field: str) -> dict:
    if not isinstance(node, dict):
        raise SpecError(f"{field} must be a mapping, got {type(node).__name__}")
    return node


def _take(node: dict, field: str, context: str):
    if field not in node:
        raise SpecError(f"{context}.{field} is missing")
    return node[field]


def _coerce_count(value, field: str) -> int:
    # YAML turns 32e9 into a float; accept integral floats for counts too.
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return _require_positive_int(value, field)


def parse_cluster_spec(text: str) -> ClusterSpec:
    """Parse a cluster spec document. Raises SpecError with position or field info."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise SpecError(f"cluster spec syntax error{where}: {exc}") from exc
    doc = _as_mapping(doc, "cluster spec")

    model_node = _as_mapping(_take(doc, "model", "spec"), "model")
    model = ModelSpec(
        layers=_coerce_count(_take(model_node, "layers", "model"), "model.layers"),
        hidden_dim=_coerce_count(_take(model_node, "hidden_dim", "model"), "model.hidden_dim"),
        param_count=_coerce_count(_take(model_node, "param_count", "model"), "model.param_count"),
        bytes_per_param=_coerce_count(_take(model_node, "bytes_per_param", "model"), "model.bytes_per_param"),
    )

    engine_node = _as_mapping(_take(doc, "engine", "spec"), "engine")
    engine = EngineOverheads(
        mem_utilization_fraction=float(_take(engine_node, "mem_utilization_fraction", "engine")),
        static_overhead_bytes=parse_bytes(
            _take(engine_node, "static_overhead_bytes", "engine"), "engine.static_overhead_bytes"
        ),
    )

    machines_node = _take(doc, "machines", "spec")
    if not isinstance(machines_node, list) or not machines_node:
        raise SpecError("machines must be a non-empty list")
    machines = []
    seen = set()
    for i, entry in enumerate(machines_node):
        entry = _as_mapping(entry, f"machines[{i}]")
        name = _take(entry, "name", f"machines[{i}]")
        if name in seen:
            raise SpecError(f"machines[{i}]: duplicate machine name {name!r}")
        seen.add(name)
        machines.append(
            MachineSpec(
                name=str(name),
                accelerator_count=_coerce_count(
                    _take(entry, "accelerator_count", f"machines[{i}]"),
                    f"machine[{name}].accelerator_count",
                ),
                accelerator_mem_bytes=parse_bytes(
                    _take(entry, "accelerator_mem_bytes", f"machines[{i}]"),
                    f"machine[{name}].accelerator_mem_bytes",
                ),
                accelerator_type=str(entry.get("accelerator_type", "generic")),
            )
        )

    limits_node = _as_mapping(_take(doc, "limits", "spec"), "limits")
    limits = WorkloadLimits(
        max_input_len=_coerce_count(_take(limits_node, "max_input_len", "limits"), "limits.max_input_len"),
        max_output_len=_coerce_count(_take(limits_node, "max_output_len", "limits"), "limits.max_output_len"),
    )

    return ClusterSpec(model=model, engine=engine, machines=tuple(machines), limits=limits)


def serialize_cluster_spec(spec: ClusterSpec) -> str:
    """Render a ClusterSpec back to spec-document text (parse round-trips)."""
    doc = {
        "model": {
            "layers": spec.model.layers,
            "hidden_dim": spec.model.hidden_dim,
            "param_count": spec.model.param_count,
            "bytes_per_param": spec.model.bytes_per_param,
        },
        "engine": {
            "mem_utilization_fraction": spec.engine.mem_utilization_fraction,
            "static_overhead_bytes": spec.engine.static_overhead_bytes,
        },
        "machines": [
            {
                "name": m.name,
                "accelerator_count": m.accelerator_count,
                "accelerator_mem_bytes": m.accelerator_mem_bytes,
                "accelerator_type": m.accelerator_type,
            }
            for m in spec.machines
        ],
        "limits": {
            "max_input_len": spec.limits.max_input_len,
            "max_output_len": spec.limits.max_output_len,
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


def parse_trace(text: str) -> list[Request]:
    """Parse a line-delimited trace. Blank lines are ignored; order is preserved.

    ``predicted_output_len`` starts equal to the recorded output length; a
    predictor may overwrite it later.
    """
    requests: list[Request] = []
    seen_ids: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"trace line {lineno}: invalid record: {exc}") from exc
        if not isinstance(record, dict):
            raise TraceError(f"trace line {lineno}: expected an object, got {type(record).__name__}")
        try:
            rid = str(record["id"])
            input_len = int(record["input_len"])
            output_len = int(record["output_len"])
        except KeyError as exc:
            raise TraceError(f"trace line {lineno}: missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise TraceError(f"trace line {lineno}: non-integer length: {exc}") from exc
        if input_len < 1 or output_len < 1:
            raise TraceError(f"trace line {lineno}: lengths must be >= 1 (request {rid!r})")
        if rid in seen_ids:
            raise TraceError(f"trace line {lineno}: duplicate request id {rid!r}")
        seen_ids.add(rid)
        requests.append(
            Request(id=rid, input_len=input_len, output_len=output_len, predicted_output_len=output_len)
        )
    return requests


def serialize_trace(requests: list[Request]) -> str:
    lines = [
        json.dumps({"id": r.id, "input_len": r.input_len, "output_len": r.output_len}, sort_keys=True)
        for r in requests
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def enumerate_tp_degrees(machine: MachineSpec) -> list[int]:
    """Power-of-two tensor-parallel degrees that evenly divide the accelerator count."""
    degrees = []
    t = 1
    while t <= machine.accelerator_count:
        if machine.accelerator_count % t == 0:
            degrees.append(t)
        t *= 2
    return degrees


def deployment_for(machines: tuple[MachineSpec, ...] | list[MachineSpec], degrees: dict[str, int]) -> DeploymentConfig:
    """Build a DeploymentConfig from per-machine degrees, validating divisibility."""
    placements = []
    names = {m.name for m in machines}
    for name in degrees:
        if name not in names:
            raise SpecError(f"deployment names unknown machine {name!r}")
    for m in machines:
        if m.name not in degrees:
            raise SpecError(f"deployment is missing a tensor-parallel degree for machine {m.name!r}")
        t = degrees[m.name]
        if t < 1 or m.accelerator_count % t != 0:
            raise SpecError(
                f"machine {m.name!r}: tp degree {t} does not divide accelerator count {m.accelerator_count}"
            )
        placements.append(MachinePlacement(machine=m.name, tp_degree=t, instance_count=m.accelerator_count // t))
    return DeploymentConfig(per_machine=tuple(placements))
