from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings as hsettings, strategies as st

from conftest import tau_objective
from oracles import unit_step_order
from mfsim.benchmarks import MfHartmann
from mfsim.core import (
    ConfigPoint,
    DomainError,
    ExperimentSettings,
    IntermediateState,
    QueryArgs,
    QueryResult,
    SimClock,
    SimulatorError,
)
from mfsim.optimizers import ScriptedPolicy
from mfsim.simulator import (
    BudgetExceeded,
    ObservationRecord,
    PendingJob,
    charge_job,
    consume_state,
    record_state,
    release_order,
    resolve_restart,
    simulate_ask_and_tell,
    simulate_naive,
)


def job(i: int, tau: float) -> tuple[dict, QueryArgs]:
    return {"job": i, "tau": tau}, QueryArgs()


def run_script(taus, n_workers, latency=0.0, **kw):
    s = ExperimentSettings(n_workers=n_workers, n_evals=len(taus), n_actual_evals_in_opt=len(taus) + n_workers, **kw)
    # trailing fillers keep idle workers busy long after every real job is done
    jobs = [job(i, t) for i, t in enumerate(taus)] + [job(-1, 1e12)] * n_workers
    return simulate_ask_and_tell(ScriptedPolicy(jobs), tau_objective, s, latency=latency)


# -- charge_job ---------------------------------------------------------------


def test_charge_single_job():
    c = charge_job(SimClock.fresh(1), 1, 0.0, 3.0)
    assert (c.now, c.times, c.n_obs) == (0.0, (3.0,), 1)


def test_charge_substitution():
    c = charge_job(SimClock((4.0, 0.0), now=10.0), 1, 1.0, 5.0)
    assert c.now == 11.0 and c.times == (16.0, 0.0)


def test_charge_restart_credit():
    c = charge_job(SimClock((11.0,), now=11.0), 1, 0.0, 20.0, 12.0)
    assert c.times == (19.0,)


def test_charge_rejects_credit_above_runtime():
    with pytest.raises(DomainError, match="credit"):
        charge_job(SimClock.fresh(1), 1, 0.0, 5.0, 6.0)
    with pytest.raises(DomainError):
        charge_job(SimClock.fresh(1), 1, -1.0, 5.0)
    with pytest.raises(DomainError, match="worker"):
        charge_job(SimClock.fresh(2), 3, 0.0, 5.0)


@hsettings(max_examples=300)
@given(
    st.lists(st.tuples(st.integers(1, 4), st.floats(0, 10), st.floats(0, 100)), min_size=1, max_size=30)
)
def test_clock_never_moves_backward(steps):
    clock = SimClock.fresh(4)
    for w, t, tau in steps:
        new = charge_job(clock, w, t, tau)
        assert new.now >= clock.now
        assert all(a >= b for a, b in zip(new.times, clock.times))
        assert new.time_of(w) >= new.now
        clock = new


# -- release_order -----------------------------------------------------------


def _pending(worker, finish):
    return PendingJob(worker, ConfigPoint({"w": worker}), QueryArgs(), QueryResult({"loss": 0}, finish), finish, 0.0)


def test_release_strict_argmin():
    jobs = [_pending(1, 3.0), _pending(2, 5.0)]
    assert release_order(SimClock((3.0, 5.0)), jobs).worker == 1


def test_release_tie_goes_to_lower_index():
    jobs = {1: _pending(1, 5.0), 2: _pending(2, 5.0)}
    assert release_order(SimClock((5.0, 5.0)), jobs).worker == 1


def test_release_three_workers():
    jobs = [_pending(p, t) for p, t in ((1, 7.0), (2, 4.0), (3, 9.0))]
    assert release_order(SimClock((7.0, 4.0, 9.0)), jobs).worker == 2


def test_release_waits_for_idle_argmin_worker():
    # worker 1 is still sampling: its clock is lowest, so nobody may deliver yet
    assert release_order(SimClock((2.0, 5.0)), [_pending(2, 5.0)]) is None


# -- resolve_restart -----------------------------------------------------------


CFG = ConfigPoint({"x": 0.5})


def _cache(*states):
    cache: dict = {}
    for s in states:
        cache.setdefault(CFG.key, []).append(s)
    return cache


def test_restart_no_states():
    assert resolve_restart({}, CFG, QueryArgs({"epoch": 100}), 55.0, "epoch") == (0.0, None)


def test_restart_uses_past_checkpoint():
    s = IntermediateState(12.0, 40.0, QueryArgs({"epoch": 20}))
    assert resolve_restart(_cache(s), CFG, QueryArgs({"epoch": 100}), 55.0, "epoch") == (12.0, s)


def test_restart_ignores_future_checkpoint():
    s = IntermediateState(12.0, 60.0, QueryArgs({"epoch": 20}))
    assert resolve_restart(_cache(s), CFG, QueryArgs({"epoch": 100}), 55.0, "epoch") == (0.0, None)


def test_restart_needs_strictly_lower_fidelity_and_prefers_most_progress():
    same = IntermediateState(30.0, 10.0, QueryArgs({"epoch": 100}))
    low = IntermediateState(5.0, 10.0, QueryArgs({"epoch": 10}))
    mid = IntermediateState(12.0, 20.0, QueryArgs({"epoch": 20}))
    credit, chosen = resolve_restart(_cache(same, low, mid), CFG, QueryArgs({"epoch": 100}), 55.0, "epoch")
    assert (credit, chosen) == (12.0, mid)


def test_restart_disabled_without_fidel_key():
    s = IntermediateState(12.0, 40.0, QueryArgs({"epoch": 20}))
    assert resolve_restart(_cache(s), CFG, QueryArgs({"epoch": 100}), 55.0, None) == (0.0, None)


def test_consume_then_record():
    cache: dict = {}
    s = record_state(cache, CFG, QueryArgs({"epoch": 1}), 3.0, 3.0)
    consume_state(cache, CFG, IntermediateState(3.0, 3.0, QueryArgs({"epoch": 1})))
    assert cache == {}
    record_state(cache, CFG, QueryArgs({"epoch": 1}), 3.0, 3.0)
    record_state(cache, CFG, QueryArgs({"epoch": 3}), 9.0, 12.0)
    consume_state(cache, CFG, s)
    assert [x.runtime_spent for x in cache[CFG.key]] == [9.0]


# -- ask-and-tell runs ---------------------------------------------------------


def test_hand_trace_three_jobs():
    records = run_script([3, 5, 2], n_workers=2)
    assert [r.config["job"] for r in records] == [0, 2, 1]
    assert [(r.worker, r.finish_time) for r in records] == [(1, 3.0), (1, 5.0), (2, 5.0)]


def test_single_worker_sequential():
    records = run_script([1, 1, 1, 1, 1], n_workers=1)
    assert [r.config["job"] for r in records] == [0, 1, 2, 3, 4]
    assert records[-1].finish_time == 5.0
    assert [r.index for r in records] == [1, 2, 3, 4, 5]


def test_budget_below_bound_rejected_before_any_ask():
    from mfsim.core import SettingsError

    class Never:
        def ask(self):
            raise AssertionError("asked despite invalid settings")

        def tell(self, record):
            pass

    with pytest.raises(SettingsError, match="n_actual_evals_in_opt"):
        simulate_ask_and_tell(Never(), tau_objective, ExperimentSettings(n_workers=2, n_evals=3, n_actual_evals_in_opt=4))


def test_ask_count_stays_within_budget():
    calls = {"n": 0}

    class Counting:
        def ask(self):
            calls["n"] += 1
            return {"tau": 1.0, "job": calls["n"]}, QueryArgs()

        def tell(self, record):
            pass

    s = ExperimentSettings(n_workers=2, n_evals=4)
    assert len(simulate_ask_and_tell(Counting(), tau_objective, s, latency=0.0)) == 4
    # P initial asks, then one per delivery except the last
    assert calls["n"] == 5 <= s.n_actual_evals_in_opt
    assert BudgetExceeded.__mro__[1] is SimulatorError


def test_scripted_policy_errors_when_empty():
    s = ExperimentSettings(n_workers=1, n_evals=2)
    with pytest.raises(SimulatorError, match="ran out"):
        simulate_ask_and_tell(ScriptedPolicy([job(0, 1)]), tau_objective, s, latency=0.0)


def test_measured_latency_is_charged():
    s = ExperimentSettings(n_workers=1, n_evals=3)
    records = simulate_ask_and_tell(ScriptedPolicy([job(i, 1.0) for i in range(4)]), tau_objective, s)
    assert records[-1].finish_time >= 3.0
    assert records[-1].finish_time < 3.5


def test_benchmark_errors_propagate():
    s = ExperimentSettings(n_workers=1, n_evals=1, fidel_keys=["epoch"])
    bench = MfHartmann(dim=3, min_fidel=1, max_fidel=9)
    with pytest.raises(DomainError, match="x1"):
        simulate_ask_and_tell(
            ScriptedPolicy([({"x0": 0.1, "x1": 1.5, "x2": 0.3}, QueryArgs({"epoch": 9}))]), bench, s, latency=0.0
        )


def test_fidelity_key_mismatch_rejected():
    s = ExperimentSettings(n_workers=1, n_evals=1, fidel_keys=["epoch"])
    with pytest.raises(DomainError, match="resolution"):
        simulate_ask_and_tell(ScriptedPolicy([({"tau": 1}, QueryArgs({"resolution": 1}))]), tau_objective, s, latency=0.0)


# -- properties ----------------------------------------------------------------


def _distinct_instance(rng: random.Random):
    while True:
        p = rng.choice([2, 3])
        n = rng.randint(4, 8)
        taus = [rng.randint(1, 5) for _ in range(n)]
        order, finish = unit_step_order(taus, p)
        if len(set(finish)) == len(finish):
            return p, taus, order


def test_matches_unit_step_oracle():
    rng = random.Random(20240611)
    mismatches = 0
    for _ in range(200):
        p, taus, expected = _distinct_instance(rng)
        got = [r.config["job"] for r in run_script(taus, p)]
        mismatches += got != expected
    assert mismatches == 0


@hsettings(max_examples=200, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 5), min_size=1, max_size=8))
def test_unit_step_oracle_with_ties(p, taus):
    # ties are resolved by worker index in both implementations, so even
    # coincident finish times must agree
    expected, _ = unit_step_order(taus, p)
    assert [r.config["job"] for r in run_script(taus, p)] == expected


@hsettings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.lists(st.floats(0, 1e4), min_size=1, max_size=25), st.floats(0, 5))
def test_delivery_times_non_decreasing(p, taus, latency):
    records = run_script(taus, p, latency=latency)
    times = [r.finish_time for r in records]
    assert times == sorted(times)
    assert [r.index for r in records] == list(range(1, len(taus) + 1))


def _conservation_case(rng: random.Random):
    n = rng.randint(1, 40)
    taus = [rng.uniform(0, 1e4) for _ in range(n)]
    lats = [rng.uniform(0, 10) for _ in range(n + 1)]
    it = iter(lats)
    records = run_script(taus, 1, latency=lambda: next(it))
    # interleaved left-to-right sum mirrors how the clock accumulates
    acc = 0.0
    for t, tau in zip(lats, taus):
        acc = acc + t + tau
    return records[-1].finish_time, acc, math.fsum(taus) + math.fsum(lats[:n])


def test_conservation_single_worker():
    rng = random.Random(7)
    for _ in range(1000):
        final, sequential, exact = _conservation_case(rng)
        assert final == sequential
        assert abs(final - exact) <= 1e-12 * exact


def test_restart_credits_telescope():
    bench = MfHartmann(dim=3, runtime_scale=10.0, min_fidel=1, max_fidel=9)
    s = ExperimentSettings(n_workers=1, n_evals=3, fidel_keys=["epoch"], continual_max_fidel=9)
    x = {"x0": 0.2, "x1": 0.4, "x2": 0.6}
    policy = ScriptedPolicy([(x, QueryArgs({"epoch": e})) for e in (1, 3, 9)])
    records = simulate_ask_and_tell(policy, bench, s, latency=0.5)
    tau9 = bench(x, {"epoch": 9})["runtime"]
    assert records[-1].finish_time == pytest.approx(tau9 + 1.5, rel=1e-12)
    # without restarts the rung runtimes add up instead
    plain = ExperimentSettings(n_workers=1, n_evals=3, fidel_keys=["epoch"])
    policy = ScriptedPolicy([(x, QueryArgs({"epoch": e})) for e in (1, 3, 9)])
    total = sum(bench(x, {"epoch": e})["runtime"] for e in (1, 3, 9))
    assert simulate_ask_and_tell(policy, bench, plain, latency=0.5)[-1].finish_time == pytest.approx(total + 1.5)


def test_checkpoint_is_not_credited_twice():
    bench = MfHartmann(dim=3, runtime_scale=10.0, min_fidel=1, max_fidel=9)
    s = ExperimentSettings(n_workers=2, n_evals=4, fidel_keys=["epoch"], continual_max_fidel=9)
    x = {"x0": 0.2, "x1": 0.4, "x2": 0.6}
    y = {"x0": 0.9, "x1": 0.9, "x2": 0.9}
    filler = (y, QueryArgs({"epoch": 9}))
    # both workers finish their epoch-1 job at t1; worker 1 resumes x at epoch 9,
    # then worker 2 wants x at epoch 3 from the same (already consumed) checkpoint
    policy = ScriptedPolicy(
        {
            1: [(x, QueryArgs({"epoch": 1})), (x, QueryArgs({"epoch": 9})), filler],
            2: [(y, QueryArgs({"epoch": 1})), (x, QueryArgs({"epoch": 3})), filler],
        }
    )
    records = simulate_ask_and_tell(policy, bench, s, latency=0.0)
    t1, t3, t9 = (bench(x, {"epoch": e})["runtime"] for e in (1, 3, 9))
    got = {(r.worker, r.args.fidelity("epoch")): r.finish_time for r in records}
    assert got[(1, 9)] == pytest.approx(t9)
    assert got[(2, 3)] == pytest.approx(t1 + t3)


# -- naive (real sleeping) mode -----------------------------------------------


def _replay_order_matches(naive, settings, window):
    replay = ScriptedPolicy(naive.jobs_by_worker, n_workers=settings.n_workers)
    sim = simulate_ask_and_tell(replay, tau_objective, settings, latency=0.0)
    finish = {r.config.key: r.finish_time for r in sim}
    seq = [finish[r.config.key] for r in naive.records]
    # every inversion in the naive order must be a near-tie
    return all(seq[i] <= seq[j] + window for i in range(len(seq)) for j in range(i + 1, len(seq))), sim


def test_sleep_oracle_agrees_with_simulation():
    rng = random.Random(3)
    taus = [rng.choice([1, 2, 3, 5, 8]) + rng.random() * 0.3 for _ in range(16)]
    s = ExperimentSettings(n_workers=3, n_evals=12, n_actual_evals_in_opt=16)
    scale = 0.02  # one simulated second lasts 20 ms
    naive = simulate_naive(ScriptedPolicy([job(i, t) for i, t in enumerate(taus)]), tau_objective, s, scale)
    assert len(naive.records) == 12
    ok, sim = _replay_order_matches(naive, s, window=0.01 / scale)
    assert ok
    assert {r.config for r in naive.records} == {r.config for r in sim}


def test_record_serialization():
    r = ObservationRecord(1, ConfigPoint({"a": 1}), QueryArgs({"epoch": 3}, 5), {"loss": math.inf}, 2.0, 1, 2.0)
    doc = r.to_dict(store_config=True)
    assert ObservationRecord.from_dict(doc) == r
    assert "config" not in r.to_dict(store_config=False)
    assert "Infinity" in r.to_json()
