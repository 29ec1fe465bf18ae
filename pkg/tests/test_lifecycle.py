import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifecycle import (
    MaintenanceScheduler,
    TransitionQueue,
    apply_usage,
    apply_usage_batch,
    initial_tier,
    lifecycle_snapshot,
    maintenance_sweep,
    next_tier,
    next_tier_codes,
)
from memory_store import MemoryStore
from utils.datatypes import LifecycleThresholds, Tier, TierTransition, TransitionCause, UsageEvent

from tests.conftest import make_config, unit

TH = LifecycleThresholds()
ADJACENT = {
    Tier.HOT: {Tier.HOT, Tier.WARM},
    Tier.WARM: {Tier.HOT, Tier.WARM, Tier.COLD},
    Tier.COLD: {Tier.WARM, Tier.COLD},
}


def fill(store, n, t=0.0):
    return [store.put(f"item {i}", unit(store.dim, i), 0.5, t) for i in range(n)]


def test_next_tier_examples():
    assert next_tier(Tier.WARM, 5.0, TH) is Tier.HOT
    assert next_tier(Tier.HOT, 4.0, TH) is Tier.HOT
    assert next_tier(Tier.WARM, 4.0, TH) is Tier.WARM
    assert next_tier(Tier.WARM, 0.4, TH) is Tier.COLD
    assert next_tier(Tier.HOT, 2.9, TH) is Tier.WARM
    assert next_tier(Tier.COLD, 1.0, TH) is Tier.WARM


def test_initial_tier_has_no_hysteresis():
    assert initial_tier(5.0, TH) is Tier.HOT
    assert initial_tier(4.9, TH) is Tier.WARM
    assert initial_tier(0.9, TH) is Tier.COLD


@settings(max_examples=300, deadline=None)
@given(tier=st.sampled_from(list(Tier)), v=st.floats(min_value=0.0, max_value=100.0))
def test_one_step_and_fixed_point(tier, v):
    first = next_tier(tier, v, TH)
    assert first in ADJACENT[tier]
    second = next_tier(first, v, TH)
    assert next_tier(second, v, TH) is second


@settings(max_examples=100, deadline=None)
@given(
    codes=st.lists(st.integers(0, 2), min_size=1, max_size=50),
    seed=st.integers(0, 2**16),
)
def test_vectorized_next_tier_matches_scalar(codes, seed):
    values = np.random.default_rng(seed).uniform(0.0, 8.0, size=len(codes))
    out = next_tier_codes(np.array(codes, dtype=np.int8), values, TH)
    for code, v, got in zip(codes, values, out):
        assert Tier.from_code(got) is next_tier(Tier.from_code(code), float(v), TH)


def test_no_oscillation_inside_hot_band():
    rng = np.random.default_rng(11)
    transitions = 0
    for _ in range(1000):
        tier = Tier.HOT if rng.random() < 0.5 else Tier.WARM
        v = rng.uniform(3.01, 4.99)
        for _ in range(50):
            v = float(np.clip(v + rng.normal(0.0, 0.3), 3.0 + 1e-9, 5.0 - 1e-9))
            new = next_tier(tier, v, TH)
            transitions += new is not tier
            tier = new
    assert transitions == 0


def test_apply_usage_queues_promotion(store):
    (item,) = fill(store, 1)
    store.update_item_atomic(item, value=4.5, tier=Tier.WARM)
    queue = TransitionQueue()
    transition = apply_usage(store, UsageEvent(item, 1, 1, 0.0), store.config.params, TH, queue)
    assert store.get(item).value == 7.5
    assert transition.cause is TransitionCause.PROMOTION
    assert (transition.from_tier, transition.to_tier) == (Tier.WARM, Tier.HOT)
    # tier change is only queued
    assert store.get(item).tier is Tier.WARM
    assert len(queue) == 1
    assert store.get(item).t_last_access == 0.0


def test_batch_feedback_rewards_selected_and_touched(store):
    a, b = fill(store, 2)
    contrib = np.array([True, False])
    apply_usage_batch(store, np.array([a, b]), contrib, 0.0, store.config.params, TH)
    assert store.get(a).value == 5.0 + 3.0
    assert store.get(b).value == 5.0 + 1.0


def test_sweep_applies_decay_and_one_demotion():
    config = make_config(**{"lambda": math.log(2) / 600})
    store = MemoryStore(config)
    (item,) = fill(store, 1)
    store.update_item_atomic(item, value=6.0)
    report = maintenance_sweep(store, 1200.0, config.params, config.thresholds, 1024)
    state = store.get(item)
    assert state.value == pytest.approx(1.5, rel=1e-12)
    assert state.tier is Tier.WARM
    assert report.demoted == 1
    assert report.transitions[0].cause is TransitionCause.DEMOTION


def test_sweep_on_empty_store():
    config = make_config()
    store = MemoryStore(config)
    report = maintenance_sweep(store, 10.0, config.params, config.thresholds, 1024)
    assert report.counts() == {"decayed": 0, "demoted": 0, "promoted": 0, "evicted": 0}
    assert report.value_summary == {"min": 0.0, "p50": 0.0, "p90": 0.0, "max": 0.0}


def test_eviction_threshold_is_strict(store):
    (item,) = fill(store, 1)
    store.update_item_atomic(item, value=0.1, tier=Tier.COLD)
    maintenance_sweep(store, 0.0, store.config.params, TH, 1024)
    assert store.is_live(item)
    store.update_item_atomic(item, value=0.0999)
    report = maintenance_sweep(store, 0.0, store.config.params, TH, 1024)
    assert not store.is_live(item)
    assert report.transitions[-1].cause is TransitionCause.EVICTION


def test_warm_item_can_be_demoted_and_evicted_in_one_visit(store):
    (item,) = fill(store, 1)
    store.update_item_atomic(item, value=0.05, tier=Tier.WARM)
    report = maintenance_sweep(store, 0.0, store.config.params, TH, 1024)
    assert report.demoted == 1 and report.evicted == 1
    assert not store.is_live(item)


def test_idle_store_follows_closed_form_schedule():
    half_life = 600.0
    config = make_config(**{"lambda": math.log(2) / half_life})
    store = MemoryStore(config)
    ids = fill(store, 20)

    def expected_tier(tier, v):
        return next_tier(tier, v, TH)

    tier = Tier.HOT
    for step in range(1, 11):
        t = step * half_life
        v = 5.0 * 2.0 ** (-step)
        maintenance_sweep(store, t, config.params, TH, 1024)
        tier = expected_tier(tier, v)
        evict = tier is Tier.COLD and v < TH.theta_e
        for item in ids:
            if evict:
                assert not store.is_live(item)
            else:
                assert store.get(item).tier is tier
        if evict:
            break
    assert store.count_live() == 0
    assert store.check_partition()


def test_liveness_within_two_rotations():
    config = make_config(**{"lambda": math.log(2) / 60})
    store = MemoryStore(config)
    ids = fill(store, 10)
    for item in ids:
        store.update_item_atomic(item, value=config.params.v_max)
    horizon = math.log(config.params.v_max / TH.theta_e) / config.params.lambda_
    batch = 3
    per_rotation = math.ceil(len(ids) / batch)
    t = horizon + 1.0
    for i in range(2 * per_rotation):
        maintenance_sweep(store, t + i, config.params, TH, batch)
    assert store.count_live() == 0


def test_sweep_drains_queued_transitions(store):
    (item,) = fill(store, 1)
    store.update_item_atomic(item, value=4.5, tier=Tier.WARM)
    queue = TransitionQueue()
    apply_usage(store, UsageEvent(item, 1, 1, 0.0), store.config.params, TH, queue)
    report = maintenance_sweep(store, 0.0, store.config.params, TH, 1, queue)
    assert report.queue_applied == 1
    assert report.promoted == 1
    assert store.get(item).tier is Tier.HOT
    assert len(queue) == 0


def test_transition_queue_overflow_is_counted():
    queue = TransitionQueue(maxsize=1)
    t = TierTransition(1, Tier.WARM, Tier.HOT, 6.0, 0.0, TransitionCause.PROMOTION)
    assert queue.put(t)
    assert not queue.put(t)
    assert queue.dropped == 1
    assert queue.drain() == [t]


def test_snapshot_record(store):
    fill(store, 3)
    report = maintenance_sweep(store, 1.0, store.config.params, TH, 2)
    record = lifecycle_snapshot(store, report, 1.0, "amvl")
    assert record["event"] == "lifecycle_snapshot"
    assert record["hot"] + record["warm"] + record["cold"] == record["stored"] == 3
    assert record["visited"] == 2
    assert record["cursor"] == 3
    assert set(record["values"]) == {"min", "p50", "p90", "max"}


def test_sweep_inside_a_request_is_counted(store):
    fill(store, 4)
    with store.request_scope():
        maintenance_sweep(store, 1e6, store.config.params, TH, 1024)
    assert store.request_path.sweeps == 1
    assert store.request_path.migrations > 0
    assert store.sweeps_total == 1


def test_scheduler_runs_tasks_in_submission_order():
    scheduler = MaintenanceScheduler()
    seen = []
    try:
        futures = [scheduler.submit(seen.append, i) for i in range(5)]
        assert scheduler.run(len, seen) == 5
    finally:
        scheduler.close()
    assert seen == [0, 1, 2, 3, 4]
    assert all(f.done() for f in futures)
