import math
import random

import pytest

from hetserve import (
    InstanceHandle,
    KvBudget,
    LatencyParams,
    OutputLengthPredictor,
    PolicyConfig,
    PredictorConfig,
    Scheduler,
    SchedulingError,
    SpecError,
    WorkloadLimits,
    decode_time,
    ideal_batch_size,
    per_request_cost,
    prefill_time,
    request_oversized,
    workload,
)
from util import MODEL_8B, TINY_MODEL, params_from, req

LIMITS = WorkloadLimits(max_input_len=4096, max_output_len=4096)


def handle(idx: int, params: LatencyParams, budget: float, machine: str = "m") -> InstanceHandle:
    return InstanceHandle(id=f"i{idx}", machine=machine, tp_degree=1, params=params, budget=KvBudget(budget))


def scheduler_for(param_list, budgets=None, policy=None, model=TINY_MODEL) -> Scheduler:
    budgets = budgets or [1e12] * len(param_list)
    handles = [handle(i, p, b) for i, (p, b) in enumerate(zip(param_list, budgets))]
    return Scheduler(handles, model, policy or PolicyConfig())


# predictor ------------------------------------------------------------------


def test_predictor_degenerate_normal():
    predictor = OutputLengthPredictor(
        PredictorConfig(mode="normal", mean=100, stddev=0, seed=1), LIMITS.max_output_len
    )
    assert all(predictor.predict(req("a", 1, 7)) == 100 for _ in range(20))


def test_predictor_oracle():
    predictor = OutputLengthPredictor(PredictorConfig(mode="oracle"), LIMITS.max_output_len)
    assert predictor.predict(req("a", 1, 57)) == 57


def test_predictor_mean_mode():
    predictor = OutputLengthPredictor(PredictorConfig(mode="mean", mean=99.6), LIMITS.max_output_len)
    assert predictor.predict(req("a", 1, 7)) == 100


def test_predictor_clamps_to_bounds():
    predictor = OutputLengthPredictor(
        PredictorConfig(mode="normal", mean=10, stddev=50, seed=3), LIMITS.max_output_len
    )
    draws = [predictor.predict(req("a", 1, 7)) for _ in range(400)]
    assert all(1 <= d <= LIMITS.max_output_len for d in draws)
    assert min(draws) == 1  # some raw draws were negative and got clamped


def test_predictor_seed_reproducible():
    cfg = PredictorConfig(mode="normal", mean=100, stddev=30, seed=11)
    a = OutputLengthPredictor(cfg, LIMITS.max_output_len)
    b = OutputLengthPredictor(cfg, LIMITS.max_output_len)
    r = req("x", 1, 1)
    assert [a.predict(r) for _ in range(50)] == [b.predict(r) for _ in range(50)]


def test_predictor_config_validation():
    with pytest.raises(SpecError, match="mode"):
        OutputLengthPredictor(PredictorConfig(mode="magic"), 10)
    with pytest.raises(SpecError, match="mean"):
        OutputLengthPredictor(PredictorConfig(mode="normal", stddev=1), 10)


# per-request pricing ---------------------------------------------------------


def test_ideal_batch_size_reference():
    r = req("a", 512, 512, predicted=512)
    assert ideal_batch_size(r, KvBudget(39.6e9), MODEL_8B) == 73  # floor(73.74)


def test_ideal_batch_size_exact_division():
    per_request = 524288 * 1024
    r = req("a", 512, 512)
    assert ideal_batch_size(r, KvBudget(float(7 * per_request)), MODEL_8B) == 7


def test_ideal_batch_size_floors_at_one():
    r = req("a", 512, 512)
    tiny = KvBudget(100.0)
    assert ideal_batch_size(r, tiny, MODEL_8B) == 1
    assert request_oversized(r, tiny, MODEL_8B)
    assert not request_oversized(r, KvBudget(1e12), MODEL_8B)


def test_per_request_cost_composition():
    params = LatencyParams(1e-5, 1e-3, 2e-5, 5e-3, 1e-6, 1e-4, 1e-7, 1e-5)
    r = req("a", 128, 16)
    barebones = prefill_time(params, 1, 128) + decode_time(params, 1, 128, 16)
    assert per_request_cost(params, r, 1) == pytest.approx(barebones, rel=1e-12)
    batched = prefill_time(params, 4, 128) + decode_time(params, 4, 128, 16)
    assert per_request_cost(params, r, 4) == pytest.approx(batched / 4, rel=1e-12)


def test_per_request_cost_linearity_across_instances():
    params = LatencyParams(1e-5, 1e-3, 2e-5, 5e-3, 1e-6, 1e-4, 1e-7, 1e-5)
    r = req("a", 128, 16)
    assert per_request_cost(params.scaled(2.0), r, 3) == pytest.approx(
        2 * per_request_cost(params, r, 3), rel=1e-12
    )


def test_per_request_cost_rejects_nonpositive():
    with pytest.raises(SpecError, match="corrupt"):
        per_request_cost(params_from(0, 0, 0, -1.0), req("a", 1, 1), 1)


def test_workload_values():
    assert workload(2.0, 0.5, 2.0) == pytest.approx(2 * math.e, rel=1e-12)
    assert workload(3.5, 0.0, 2.0) == 3.5
    assert workload(1.0, 2.0, 2.0) == pytest.approx(math.exp(4.0), rel=1e-12)
    with pytest.raises(SpecError):
        workload(1.0, 0.5, 0.0)


# mapping ---------------------------------------------------------------------


def test_choose_min_max_prefers_smaller_peak():
    # Costs are exactly 1 and 2 (constant-per-batch prefill, zero decode);
    # with loads [5, 1] injected, adding 2 at the idle instance wins: 6 > 5.
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 2.0)])
    sched._states[0].load = 5.0
    sched._states[1].load = 1.0
    assert sched.choose(req("x", 4, 4)) == 1


def test_choose_tie_breaks_lowest_index():
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 1.0)])
    assert sched.choose(req("x", 4, 4)) == 0


def test_choose_single_instance():
    sched = scheduler_for([params_from(0, 9.0)])
    for i in range(5):
        assert sched.choose(req(f"x{i}", 4, 4)) == 0


def test_dispatch_complete_inverse():
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 2.0)])
    sched.choose(req("x", 4, 4))
    sched.complete("x")
    assert all(abs(l) < 1e-9 for l in sched.loads())
    assert sched.running_totals() == [0, 0]


def test_reverse_completion_order_zeroes_state():
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 2.0)])
    ids = [f"r{i}" for i in range(5)]
    for rid in ids:
        sched.choose(req(rid, random.Random(3).randint(1, 32), 8))
    for rid in reversed(ids):
        sched.complete(rid)
    assert all(abs(l) < 1e-9 for l in sched.loads())
    assert sched.running_totals() == [0, 0]


def test_double_complete_and_unknown_rejected():
    sched = scheduler_for([params_from(0, 1.0)])
    sched.choose(req("x", 4, 4))
    sched.complete("x")
    with pytest.raises(SchedulingError):
        sched.complete("x")
    with pytest.raises(SchedulingError):
        sched.complete("never-dispatched")


def test_duplicate_dispatch_rejected():
    sched = scheduler_for([params_from(0, 1.0)])
    sched.choose(req("x", 4, 4))
    with pytest.raises(SchedulingError, match="in flight"):
        sched.choose(req("x", 4, 4))


def test_conservation_random_interleavings():
    rng = random.Random(99)
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 2.0), params_from(0, 0.5)])
    live = []
    for i in range(300):
        if live and rng.random() < 0.45:
            sched.complete(live.pop(rng.randrange(len(live))))
        else:
            rid = f"r{i}"
            sched.choose(req(rid, rng.randint(1, 64), rng.randint(1, 64)))
            live.append(rid)
    rng.shuffle(live)
    for rid in live:
        sched.complete(rid)
    assert all(abs(l) < 1e-9 for l in sched.loads())
    assert sched.running_totals() == [0, 0, 0]


def test_min_max_optimality_every_decision():
    rng = random.Random(5)
    sched = scheduler_for(
        [params_from(0, 1.0), params_from(0, 2.5), params_from(0, 0.7)],
        budgets=[5e5, 1e6, 2e6],
    )
    live = []
    for i in range(200):
        if live and rng.random() < 0.4:
            sched.complete(live.pop(rng.randrange(len(live))))
            continue
        r = req(f"r{i}", rng.randint(1, 64), rng.randint(1, 64))
        weights = sched.evaluate(r)
        loads = sched.loads()
        chosen = sched.choose(r)
        live.append(r.id)
        peaks = [
            max(l + (weights[s] if j == s else 0.0) for j, l in enumerate(loads))
            for s in range(len(weights))
        ]
        assert peaks[chosen] == min(peaks)
        assert chosen == peaks.index(min(peaks))  # lowest-index tie break


def test_scale_invariance_of_decisions():
    rng = random.Random(8)
    base = [
        LatencyParams(1e-5, 1e-3, 2e-5, 5e-3, 1e-6, 1e-4, 1e-7, 1e-5),
        LatencyParams(4e-5, 2e-3, 1e-5, 9e-3, 3e-6, 2e-4, 2e-7, 3e-5),
    ]
    requests = [req(f"r{i}", rng.randint(1, 64), rng.randint(1, 64)) for i in range(100)]
    seq_base, seq_scaled = [], []
    for params_set, out in ((base, seq_base), ([p.scaled(13.7) for p in base], seq_scaled)):
        sched = scheduler_for(params_set, budgets=[1e6, 4e6])
        for r in requests:
            out.append(sched.choose(r))
    assert seq_base == seq_scaled


def test_determinism_identical_runs():
    rng = random.Random(12)
    requests = [req(f"r{i}", rng.randint(1, 64), rng.randint(1, 64)) for i in range(150)]
    sequences = []
    for _ in range(2):
        sched = scheduler_for(
            [params_from(0, 1.0), params_from(0, 2.0)], budgets=[1e6, 2e6]
        )
        seq = []
        for i, r in enumerate(requests):
            seq.append(sched.choose(r))
            if i % 3 == 2:
                sched.complete(requests[i - 2].id)
        sequences.append(seq)
    assert sequences[0] == sequences[1]


def test_pressure_shift_monotone():
    # Equal instances; loading instance 0's KV pushes traffic to instance 1.
    counts = []
    for delta in (0, 2000, 8000, 32000):
        sched = scheduler_for(
            [params_from(0, 1.0), params_from(0, 1.0)], budgets=[32 * 10000.0, 32 * 10000.0]
        )
        sched._states[0].running.add(delta, 0)
        to_second = 0
        for i in range(40):
            if sched.choose(req(f"r{i}", 10, 10)) == 1:
                to_second += 1
        counts.append(to_second)
    assert counts == sorted(counts)
    assert counts[-1] > counts[0]


# baselines -------------------------------------------------------------------


def test_round_robin_cycles():
    sched = scheduler_for(
        [params_from(0, 1.0), params_from(0, 2.0)], policy=PolicyConfig(policy="RR")
    )
    assignments = [sched.choose(req(f"r{i}", 4, 4)) for i in range(4)]
    assert assignments == [0, 1, 0, 1]


def test_single_instance_policy():
    sched = scheduler_for(
        [params_from(0, 5.0), params_from(0, 1.0)], policy=PolicyConfig(policy="SI")
    )
    assert [sched.choose(req(f"r{i}", 4, 4)) for i in range(4)] == [0, 0, 0, 0]


def test_weighted_round_robin_ratio():
    sched = scheduler_for(
        [params_from(0, 1.0), params_from(0, 1.0)],
        policy=PolicyConfig(policy="WRR", wrr_weights=(4.0, 1.0)),
    )
    assignments = [sched.choose(req(f"r{i}", 4, 4)) for i in range(5)]
    assert assignments.count(0) == 4 and assignments.count(1) == 1
    # The ratio holds over every aligned window of 5.
    sched2 = scheduler_for(
        [params_from(0, 1.0), params_from(0, 1.0)],
        policy=PolicyConfig(policy="WRR", wrr_weights=(4.0, 1.0)),
    )
    longer = [sched2.choose(req(f"s{i}", 4, 4)) for i in range(25)]
    for w in range(0, 25, 5):
        window = longer[w : w + 5]
        assert window.count(0) == 4 and window.count(1) == 1


def test_wrr_requires_weights():
    with pytest.raises(SpecError, match="WRR"):
        PolicyConfig(policy="WRR")
    with pytest.raises(SpecError, match="one weight per instance"):
        scheduler_for(
            [params_from(0, 1.0)], policy=PolicyConfig(policy="WRR", wrr_weights=(4.0, 1.0))
        )


def test_memory_based_ignores_params():
    # With equal usage trajectories, MB on unequal params must match MB on
    # identical instances (cost is pinned to 1 either way).
    rng = random.Random(6)
    requests = [req(f"r{i}", rng.randint(1, 32), rng.randint(1, 32)) for i in range(60)]
    unequal = scheduler_for(
        [params_from(0, 1.0), params_from(0, 50.0)],
        budgets=[1e6, 1e6],
        policy=PolicyConfig(policy="MB"),
    )
    identical = scheduler_for(
        [params_from(0, 1.0), params_from(0, 1.0)],
        budgets=[1e6, 1e6],
        policy=PolicyConfig(policy="MB"),
    )
    seq_a = [unequal.choose(r) for r in requests]
    seq_b = [identical.choose(r) for r in requests]
    assert seq_a == seq_b


def test_choose_respects_allowed_set():
    sched = scheduler_for([params_from(0, 1.0), params_from(0, 2.0)])
    assert sched.choose(req("x", 4, 4), allowed={1}) == 1
    with pytest.raises(SchedulingError):
        sched.choose(req("y", 4, 4), allowed=set())
