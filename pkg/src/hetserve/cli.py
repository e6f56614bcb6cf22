"""Single command-line entry point for the toolkit's workflows.

Subcommands: fit (least-squares latency coefficients from profiling samples),
plan (exhaustive deployment search), simulate / compare (cluster simulation),
gen-trace (synthetic request traces), serve (gateway or a mock backend).

Exit codes are a stable contract: 0 success, 1 I/O, 2 fit/validation,
3 infeasibility. Human-readable tables go to stdout; machine-readable
line-delimited records go to files only.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import Request, parse_cluster_spec, parse_trace, serialize_trace
from .errors import FitError, HetserveError, InfeasibleError, SpecError, TraceError
from .latency import FittedRecord, fit_params, read_params_file, read_samples, write_params_file
from .planner import SearchOutcome, search_optimal_config
from .simulator import load_scenario, metrics_record, run_policy_comparison, run_scenario, write_metrics

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3

DEFAULT_SEED = 0
DEFAULT_COMPARE_POLICIES = "RR,SI,MB,OS,WRR"


def _read_text(path: str) -> str:
    return Path(path).read_text()


def cmd_fit(args: argparse.Namespace) -> int:
    prefill, decode = read_samples(_read_text(args.samples))
    params, diag = fit_params(prefill, decode)
    if diag.nonpositive_prediction:
        print(
            "fit rejected: the fitted model predicts a non-positive time on the profiled grid",
            file=sys.stderr,
        )
        return EXIT_VALIDATION
    record = FittedRecord(
        machine_name=args.machine,
        tp_degree=args.tp,
        params=params,
        residual_norm=diag.residual_norm,
    )
    out = Path(args.out)
    text = write_params_file([record])
    if args.append and out.exists():
        out.write_text(out.read_text() + text)
    else:
        out.write_text(text)
    print(f"fitted {args.machine} tp={args.tp}")
    for i, value in enumerate(params.as_tuple(), start=1):
        print(f"  p{i} = {value:.6e}")
    print(f"  residual_norm = {diag.residual_norm:.3e}")
    print(f"  condition (prefill/decode) = {diag.prefill_condition:.3e} / {diag.decode_condition:.3e}")
    return EXIT_OK


def _plan_records(outcome: SearchOutcome) -> list[dict]:
    records = []
    for rank, estimate in enumerate(outcome.ranked, start=1):
        records.append(
            {
                "rank": rank,
                "config": {p.machine: p.tp_degree for p in estimate.config.per_machine},
                "system_tokens_per_sec": estimate.system_tokens_per_sec,
                "per_machine": [
                    {
                        "machine": m.machine,
                        "tp_degree": m.tp_degree,
                        "instance_count": m.instance_count,
                        "instance_tokens_per_sec": m.instance_tokens_per_sec,
                        "machine_tokens_per_sec": m.machine_tokens_per_sec,
                        "slack_bytes": m.slack_bytes,
                    }
                    for m in estimate.per_machine
                ],
            }
        )
    for config, reason in outcome.infeasible:
        records.append(
            {"config": {p.machine: p.tp_degree for p in config.per_machine}, "infeasible": reason}
        )
    return records


def cmd_plan(args: argparse.Namespace) -> int:
    cluster = parse_cluster_spec(_read_text(args.spec))
    trace = parse_trace(_read_text(args.trace))
    if not trace:
        raise SpecError("plan needs a non-empty trace to estimate throughput")
    params = read_params_file(_read_text(args.params))
    outcome = search_optimal_config(cluster, trace, params)

    if args.out:
        Path(args.out).write_text(
            "\n".join(json.dumps(r, sort_keys=True) for r in _plan_records(outcome)) + "\n"
        )
    if not outcome.ranked:
        print("no feasible deployment configuration:", file=sys.stderr)
        for config, reason in outcome.infeasible:
            print(f"  {config.describe()}: {reason}", file=sys.stderr)
        return EXIT_INFEASIBLE

    best = outcome.best
    print(f"best: {best.config.describe()}  ({best.system_tokens_per_sec:.1f} tokens/s estimated)")
    print(f"{'rank':>4}  {'config':<40} {'tokens/s':>12}")
    for rank, estimate in enumerate(outcome.ranked, start=1):
        print(f"{rank:>4}  {estimate.config.describe():<40} {estimate.system_tokens_per_sec:>12.1f}")
    for config, reason in outcome.infeasible:
        print(f"   -  {config.describe():<40} infeasible: {reason}")
    return EXIT_OK


def _metrics_table(results) -> str:
    lines = [f"{'policy':<6} {'rate':>8} {'tokens/s':>12} {'makespan':>12} {'spread':>12}"]
    for m in results:
        rate = "inf" if math.isinf(m.rate) else f"{m.rate:g}"
        lines.append(
            f"{m.policy:<6} {rate:>8} {m.system_throughput:>12.1f} {m.makespan:>12.3f} "
            f"{m.completion_time_spread:>12.3f}"
        )
    return "\n".join(lines)


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(
        args.scenario, policy=args.policy, theta=args.theta, rate=args.rate, mode=args.mode, seed=args.seed
    )
    metrics = run_scenario(scenario)
    print(_metrics_table([metrics]))
    if args.out:
        Path(args.out).write_text(write_metrics([metrics]))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = load_scenario(
        args.scenario, theta=args.theta, rate=args.rate, mode=args.mode, seed=args.seed
    )
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    results = run_policy_comparison(scenario, policies)
    print(_metrics_table(results))
    if args.out:
        Path(args.out).write_text(write_metrics(results))
    return EXIT_OK


def _sample_lengths(spec: str, count: int, rng: np.random.Generator, upper: int) -> list[int]:
    parts = spec.split(":")
    kind = parts[0].lower()
    try:
        if kind == "lognormal":
            mean, sigma = float(parts[1]), float(parts[2])
            if mean <= 0 or sigma <= 0:
                raise SpecError(f"lognormal needs positive mean and sigma, got {spec!r}")
            mu = math.log(mean) - sigma * sigma / 2.0
            values = rng.lognormal(mu, sigma, size=count)
        elif kind == "uniform":
            lo, hi = int(parts[1]), int(parts[2])
            if lo < 1 or hi < lo:
                raise SpecError(f"uniform needs 1 <= lo <= hi, got {spec!r}")
            values = rng.integers(lo, hi + 1, size=count).astype(float)
        else:
            raise SpecError(f"unknown distribution {kind!r}; use lognormal:MEAN:SIGMA or uniform:LO:HI")
    except (IndexError, ValueError) as exc:
        raise SpecError(f"cannot parse distribution {spec!r}: {exc}") from exc
    return [int(min(max(round(v), 1), upper)) for v in values]


def cmd_gen_trace(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    inputs = _sample_lengths(args.input_dist, args.count, rng, args.max_input_len)
    outputs = _sample_lengths(args.output_dist, args.count, rng, args.max_output_len)
    width = max(4, len(str(max(args.count - 1, 0))))
    requests = [
        Request(id=f"r{i:0{width}d}", input_len=i_len, output_len=o_len, predicted_output_len=o_len)
        for i, (i_len, o_len) in enumerate(zip(inputs, outputs))
    ]
    Path(args.out).write_text(serialize_trace(requests))
    print(f"wrote {len(requests)} requests to {args.out}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .gateway import build_gateway_from_config, load_gateway_config

    config = load_gateway_config(args.config)
    if args.backend:
        from urllib.parse import urlparse

        from .capacity import kv_budget
        from .latency import read_params_file as _read_params
        from .mock_backend import MockBackend, build_mock_backend_app

        entry = next((b for b in config.backends if b.id == args.backend), None)
        if entry is None:
            raise SpecError(f"gateway config has no backend {args.backend!r}")
        cluster = parse_cluster_spec(_read_text(config.spec_path))
        params = _read_params(_read_text(config.params_path))
        key = (entry.machine, entry.tp_degree)
        if key not in params:
            raise SpecError(f"no fitted parameters for backend {entry.id!r} ({key})")
        budget = kv_budget(cluster.machine(entry.machine), entry.tp_degree, cluster.model, cluster.engine)
        backend = MockBackend(params[key], budget, cluster.model, time_scale=args.time_scale)
        app = build_mock_backend_app(backend)
        parsed = urlparse(entry.addr)
        uvicorn.run(app, host=parsed.hostname or "127.0.0.1", port=parsed.port or 80, log_level=config.log_level)
        return EXIT_OK

    app = build_gateway_from_config(config)
    host, _, port = config.listen_addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level=config.log_level)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetserve", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit latency-model coefficients from profiling samples")
    p.add_argument("--samples", required=True, help="profiling sample file (line-delimited records)")
    p.add_argument("--out", required=True, help="fitted-parameter file to write")
    p.add_argument("--machine", default="machine0", help="machine name to stamp on the record")
    p.add_argument("--tp", type=int, default=1, help="tensor-parallel degree of the profiled instance")
    p.add_argument("--append", action="store_true", help="append to an existing parameter file")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("plan", help="rank deployment configurations by estimated throughput")
    p.add_argument("--spec", required=True, help="cluster spec file")
    p.add_argument("--trace", required=True, help="sample trace used for estimation")
    p.add_argument("--params", required=True, help="fitted-parameter file")
    p.add_argument("--out", help="plan report file (line-delimited records)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run one simulation scenario")
    p.add_argument("--scenario", required=True, help="scenario file")
    p.add_argument("--out", help="metrics file (line-delimited records)")
    p.add_argument("--policy", help="override the scenario policy")
    p.add_argument("--theta", type=float, help="override the workload pressure exponent")
    p.add_argument("--rate", help="override the arrival rate (number or 'inf')")
    p.add_argument("--mode", choices=["static", "continuous"], help="override the execution mode")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run several policies on the identical scenario")
    p.add_argument("--scenario", required=True, help="scenario file")
    p.add_argument("--out", help="metrics file (line-delimited records)")
    p.add_argument("--policies", default=DEFAULT_COMPARE_POLICIES, help="comma-separated policy list")
    p.add_argument("--theta", type=float, help="override the workload pressure exponent")
    p.add_argument("--rate", help="override the arrival rate (number or 'inf')")
    p.add_argument("--mode", choices=["static", "continuous"], help="override the execution mode")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-trace", help="generate a synthetic request trace")
    p.add_argument("--count", type=int, required=True, help="number of requests")
    p.add_argument("--input-dist", default="lognormal:200:0.6", help="lognormal:MEAN:SIGMA or uniform:LO:HI")
    p.add_argument("--output-dist", default="lognormal:150:0.6", help="lognormal:MEAN:SIGMA or uniform:LO:HI")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-input-len", type=int, default=8192)
    p.add_argument("--max-output-len", type=int, default=8192)
    p.add_argument("--out", required=True, help="trace file to write")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("serve", help="serve the scheduling gateway (or one mock backend)")
    p.add_argument("--config", required=True, help="gateway config file")
    p.add_argument("--backend", help="serve this backend id as a mock backend instead of the gateway")
    p.add_argument("--time-scale", type=float, default=1.0, help="mock backend wall-clock scale")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SpecError, TraceError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HetserveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
