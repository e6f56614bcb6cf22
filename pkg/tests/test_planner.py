import random

import pytest

from hetserve import (
    ClusterSpec,
    EngineOverheads,
    InfeasibleConfigError,
    InfeasibleRequestError,
    KvBudget,
    LatencyParams,
    MachineSpec,
    ModelSpec,
    WorkloadLimits,
    decode_time,
    deployment_for,
    enumerate_tp_degrees,
    estimate_batch_time,
    estimate_instance_throughput,
    estimate_system_throughput,
    kv_budget,
    kv_bytes_per_token,
    plan_static_batches,
    prefill_time,
    search_optimal_config,
    time_batches,
)
from util import MODEL_8B, TINY_MODEL, params_from, req


def greedy_oracle(requests, budget_bytes, per_token):
    """Re-derives the packing rule from scratch: scan forward, close the batch
    at the first request whose inclusion breaks sum(I) + width * max(O)."""
    batches = []
    start = 0
    while start < len(requests):
        stop = start
        while stop < len(requests):
            window = requests[start : stop + 1]
            need = per_token * sum(r.input_len for r in window) + len(window) * per_token * max(
                r.output_len for r in window
            )
            if need > budget_bytes:
                break
            stop += 1
        assert stop > start, "oracle hit an individually infeasible request"
        batches.append((start, stop))
        start = stop
    return batches


def test_plan_two_of_three_equal_requests():
    # per-token is 32 bytes; each request reserves 32*2 input + 32*2 output.
    requests = [req("r1", 2, 2), req("r2", 2, 2), req("r3", 2, 2)]
    plan = plan_static_batches(requests, KvBudget(256.0), TINY_MODEL)
    assert plan.batches == ((0, 2), (2, 3))


def test_plan_single_batch_when_budget_fits_all():
    requests = [req(f"r{i}", 4, 4) for i in range(5)]
    plan = plan_static_batches(requests, KvBudget(1e9), TINY_MODEL)
    assert plan.batches == ((0, 5),)


def test_plan_oversized_output_forces_close():
    # One huge output raises max(O) for the whole window, closing it early:
    # [a,b] would reserve 4 + 2*30 = 64 token-units against a 40-unit budget.
    requests = [req("a", 2, 2), req("b", 2, 30), req("c", 2, 2)]
    per_token = kv_bytes_per_token(TINY_MODEL)
    budget = KvBudget(float(per_token * 40))
    plan = plan_static_batches(requests, budget, TINY_MODEL)
    assert plan.batches == ((0, 1), (1, 2), (2, 3))
    assert list(plan.batches) == greedy_oracle(requests, budget.total_bytes, per_token)


def test_plan_matches_oracle_randomized():
    rng = random.Random(17)
    per_token = kv_bytes_per_token(TINY_MODEL)
    for _ in range(300):
        q = rng.randint(1, 10)
        requests = [req(f"r{i}", rng.randint(1, 32), rng.randint(1, 32)) for i in range(q)]
        # Budget always admits the widest single request.
        min_fit = max(per_token * (r.input_len + r.output_len) for r in requests)
        budget = KvBudget(float(rng.randint(min_fit, min_fit * 6)))
        plan = plan_static_batches(requests, budget, TINY_MODEL)
        assert list(plan.batches) == greedy_oracle(requests, budget.total_bytes, per_token)
        # Post-hoc: every batch satisfies the reservation bound and the
        # ranges partition the input contiguously.
        prev_stop = 0
        for start, stop in plan.batches:
            assert start == prev_stop
            prev_stop = stop
            window = requests[start:stop]
            need = per_token * sum(r.input_len for r in window) + len(window) * per_token * max(
                r.output_len for r in window
            )
            assert need <= budget.total_bytes
        assert prev_stop == len(requests)


def test_plan_infeasible_request_named():
    requests = [req("ok", 1, 1), req("huge", 1000, 1000)]
    with pytest.raises(InfeasibleRequestError, match="huge") as excinfo:
        plan_static_batches(requests, KvBudget(256.0), TINY_MODEL)
    assert excinfo.value.request_id == "huge"


def test_estimate_batch_time_composition():
    params = LatencyParams(1e-5, 1e-3, 2e-5, 5e-3, 1e-6, 1e-4, 1e-7, 1e-5)
    single = [req("a", 128, 16)]
    expected = prefill_time(params, 1, 128) + decode_time(params, 1, 128, 16)
    assert estimate_batch_time(single, params) == pytest.approx(expected, rel=1e-12)

    pair = [req("a", 64, 8), req("b", 64, 8)]
    expected = prefill_time(params, 2, 64) + decode_time(params, 2, 64, 8)
    assert estimate_batch_time(pair, params) == pytest.approx(expected, rel=1e-12)

    assert estimate_batch_time(pair, params_from()) == 0.0


def test_estimate_batch_time_uses_maxima():
    params = LatencyParams(1, 1, 1, 1, 1, 1, 1, 1)
    mixed = [req("a", 10, 3), req("b", 50, 1)]
    expected = prefill_time(params, 2, 50) + decode_time(params, 2, 50, 3)
    assert estimate_batch_time(mixed, params) == pytest.approx(expected, rel=1e-12)


def test_instance_throughput_arithmetic():
    # One batch, constant 2 s total time, 100 total tokens -> 50 tokens/s.
    params = params_from(0, 0, 0, 2.0)
    requests = [req("a", 30, 20), req("b", 30, 20)]
    rate = estimate_instance_throughput(requests, KvBudget(1e12), TINY_MODEL, params)
    assert rate == pytest.approx(50.0, rel=1e-12)
    # Doubling every coefficient halves the rate.
    halved = estimate_instance_throughput(requests, KvBudget(1e12), TINY_MODEL, params.scaled(2.0))
    assert halved == pytest.approx(25.0, rel=1e-12)


def test_single_request_throughput():
    params = params_from(0, 0, 0, 4.0)
    rate = estimate_instance_throughput([req("a", 60, 40)], KvBudget(1e12), TINY_MODEL, params)
    assert rate == pytest.approx(100 / 4.0, rel=1e-12)


def _cluster(machines, max_len=64) -> ClusterSpec:
    return ClusterSpec(
        model=TINY_MODEL,
        engine=EngineOverheads(mem_utilization_fraction=1.0, static_overhead_bytes=0),
        machines=tuple(machines),
        limits=WorkloadLimits(max_input_len=max_len, max_output_len=max_len),
    )


def test_system_throughput_scaling():
    machine = MachineSpec(name="m0", accelerator_count=8, accelerator_mem_bytes=10**9)
    cluster = _cluster([machine])
    config = deployment_for(cluster.machines, {"m0": 2})
    requests = [req("a", 30, 20), req("b", 30, 20)]
    params = {("m0", 2): params_from(0, 0, 0, 2.0)}
    estimate = estimate_system_throughput(cluster, config, requests, params)
    assert estimate.system_tokens_per_sec == pytest.approx(50.0 * 4, rel=1e-12)
    assert estimate.per_machine[0].instance_tokens_per_sec == pytest.approx(50.0, rel=1e-12)


def test_system_throughput_single_instance_equals_instance_rate():
    machine = MachineSpec(name="m0", accelerator_count=4, accelerator_mem_bytes=10**9)
    cluster = _cluster([machine])
    config = deployment_for(cluster.machines, {"m0": 4})
    params = {("m0", 4): params_from(0, 0, 0, 2.0)}
    estimate = estimate_system_throughput(cluster, config, [req("a", 30, 20), req("b", 30, 20)], params)
    assert estimate.system_tokens_per_sec == pytest.approx(50.0, rel=1e-12)


def test_system_throughput_additive_over_machines():
    m0 = MachineSpec(name="m0", accelerator_count=4, accelerator_mem_bytes=10**9)
    m1 = MachineSpec(name="m1", accelerator_count=4, accelerator_mem_bytes=10**9)
    cluster = _cluster([m0, m1])
    config = deployment_for(cluster.machines, {"m0": 4, "m1": 4})
    params = {("m0", 4): params_from(0, 0, 0, 2.0), ("m1", 4): params_from(0, 0, 0, 2.0)}
    requests = [req("a", 30, 20), req("b", 30, 20)]
    estimate = estimate_system_throughput(cluster, config, requests, params)
    single = estimate_system_throughput(
        _cluster([m0]), deployment_for([m0], {"m0": 4}), requests, params
    )
    assert estimate.system_tokens_per_sec == pytest.approx(2 * single.system_tokens_per_sec, rel=1e-12)


def test_infeasible_machine_reports_slack():
    tight_model = ModelSpec(layers=2, hidden_dim=4, param_count=10**9, bytes_per_param=2)
    machine = MachineSpec(name="m0", accelerator_count=8, accelerator_mem_bytes=10**9)
    cluster = ClusterSpec(
        model=tight_model,
        engine=EngineOverheads(mem_utilization_fraction=1.0, static_overhead_bytes=0),
        machines=(machine,),
        limits=WorkloadLimits(max_input_len=64, max_output_len=64),
    )
    config = deployment_for(cluster.machines, {"m0": 1})
    with pytest.raises(InfeasibleConfigError) as excinfo:
        estimate_system_throughput(cluster, config, [req("a", 1, 1)], {("m0", 1): params_from(1)})
    assert excinfo.value.machine == "m0"
    assert excinfo.value.slack_bytes < 0


def _search_setup(seed=0):
    """A machine where higher tp is faster per instance but fewer instances."""
    machine = MachineSpec(name="m0", accelerator_count=8, accelerator_mem_bytes=10**9)
    cluster = _cluster([machine], max_len=64)
    rng = random.Random(seed)
    requests = [req(f"r{i}", rng.randint(8, 64), rng.randint(8, 64)) for i in range(40)]
    base = LatencyParams(2e-5, 4e-4, 1e-5, 3e-3, 1.5e-6, 2e-4, 5e-7, 1e-4)
    params = {("m0", t): base.scaled(t**-0.7) for t in (1, 2, 4, 8)}
    return cluster, requests, params


def test_search_ranking_matches_per_degree_estimates():
    cluster, requests, params = _search_setup()
    outcome = search_optimal_config(cluster, requests, params)
    assert outcome.candidates_visited == 4
    expected = []
    for t in (1, 2, 4, 8):
        config = deployment_for(cluster.machines, {"m0": t})
        expected.append(estimate_system_throughput(cluster, config, requests, params))
    expected.sort(key=lambda e: -e.system_tokens_per_sec)
    assert [e.config for e in outcome.ranked] == [e.config for e in expected]
    assert [e.system_tokens_per_sec for e in outcome.ranked] == pytest.approx(
        [e.system_tokens_per_sec for e in expected]
    )


def test_search_single_feasible_degree():
    # Weights sized so only tp=8 leaves room for one maximal request.
    per_token = kv_bytes_per_token(TINY_MODEL)
    need = per_token * 128
    model = ModelSpec(layers=2, hidden_dim=4, param_count=(7 * 10**9 - need) // 2, bytes_per_param=2)
    machine = MachineSpec(name="m0", accelerator_count=8, accelerator_mem_bytes=10**9)
    cluster = ClusterSpec(
        model=model,
        engine=EngineOverheads(mem_utilization_fraction=1.0, static_overhead_bytes=0),
        machines=(machine,),
        limits=WorkloadLimits(max_input_len=64, max_output_len=64),
    )
    params = {("m0", t): params_from(0, 0, 0, 1.0) for t in (1, 2, 4, 8)}
    outcome = search_optimal_config(cluster, [req("a", 8, 8)], params)
    assert len(outcome.ranked) == 1
    assert outcome.ranked[0].config.per_machine[0].tp_degree == 8
    assert len(outcome.infeasible) == 3


def test_search_visits_full_product_and_composes_argmax():
    m0 = MachineSpec(name="m0", accelerator_count=8, accelerator_mem_bytes=10**9)
    m1 = MachineSpec(name="m1", accelerator_count=4, accelerator_mem_bytes=10**9)
    cluster = _cluster([m0, m1])
    rng = random.Random(4)
    requests = [req(f"r{i}", rng.randint(8, 64), rng.randint(8, 64)) for i in range(30)]
    base = LatencyParams(2e-5, 4e-4, 1e-5, 3e-3, 1.5e-6, 2e-4, 5e-7, 1e-4)
    params = {}
    for name, degrees in (("m0", enumerate_tp_degrees(m0)), ("m1", enumerate_tp_degrees(m1))):
        for t in degrees:
            params[(name, t)] = base.scaled(t**-0.6 * (1.5 if name == "m1" else 1.0))
    outcome = search_optimal_config(cluster, requests, params)
    assert outcome.candidates_visited == 4 * 3

    # Independence: the winning combo is each machine's solo argmax.
    best = outcome.best.config
    for machine in cluster.machines:
        solo_cluster = _cluster([machine])
        solo = search_optimal_config(solo_cluster, requests, params)
        assert solo.best.config.per_machine[0].tp_degree == best.degree_for(machine.name)


def test_search_ranking_invariant_under_param_scaling():
    cluster, requests, params = _search_setup()
    outcome = search_optimal_config(cluster, requests, params)
    scaled = {k: p.scaled(7.3) for k, p in params.items()}
    outcome_scaled = search_optimal_config(cluster, requests, scaled)
    assert [e.config for e in outcome.ranked] == [e.config for e in outcome_scaled.ranked]
    for a, b in zip(outcome.ranked, outcome_scaled.ranked):
        assert b.system_tokens_per_sec == pytest.approx(a.system_tokens_per_sec / 7.3, rel=1e-9)


def test_time_batches_fills_times():
    params = params_from(0, 0, 0, 1.0)
    requests = [req("a", 2, 2), req("b", 2, 2), req("c", 2, 2)]
    plan = plan_static_batches(requests, KvBudget(256.0), TINY_MODEL)
    timed = time_batches(plan, requests, params)
    assert len(timed.per_batch_time) == len(timed.batches)
    assert timed.total_time == pytest.approx(2.0)
