import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from utils.datatypes import UsageEvent, ValueParams
from utils.errors import ClockRegression
from value_model import DENORMAL_FLOOR, decay_many, decay_only, update_many, updated_value

HALF_LIFE = 600.0
PARAMS = ValueParams(alpha=1.0, beta=2.0, **{"lambda": math.log(2) / HALF_LIFE}, v_max=100.0)

values = st.floats(min_value=1e-3, max_value=100.0)
gaps = st.floats(min_value=0.0, max_value=1e4)
rates = st.floats(min_value=1e-6, max_value=1e-2)


def test_access_and_contribution_are_additive():
    v, t = updated_value(1.0, 0.0, UsageEvent(1, 1, 1, 0.0), PARAMS)
    assert v == 4.0
    assert t == 0.0


def test_one_half_life():
    v, t = updated_value(2.0, 0.0, UsageEvent(1, 0, 0, 600.0), PARAMS)
    assert v == pytest.approx(1.0, rel=1e-12)
    assert t == 600.0


def test_cap():
    v, _ = updated_value(99.5, 5.0, UsageEvent(1, 1, 1, 5.0), PARAMS)
    assert v == 100.0


def test_decay_examples():
    assert decay_only(10.0, 3.0, 3.0, PARAMS.lambda_) == 10.0
    assert decay_only(8.0, 0.0, 1200.0, PARAMS.lambda_) == pytest.approx(2.0, rel=1e-12)


def test_clock_regression():
    with pytest.raises(ClockRegression):
        decay_only(1.0, 10.0, 9.0, PARAMS.lambda_)
    with pytest.raises(ClockRegression):
        updated_value(1.0, 10.0, UsageEvent(1, 1, 0, 9.0), PARAMS)
    with pytest.raises(ClockRegression):
        decay_many(np.ones(2), np.array([0.0, 10.0]), 5.0, PARAMS.lambda_)


def test_denormal_values_clamp_to_zero():
    assert decay_only(1e-290, 0.0, 1e6, 1.0) == 0.0
    out = decay_many(np.array([1e-290, 1.0]), np.zeros(2), 100.0, 1.0)
    assert out[0] == 0.0
    assert out[1] >= DENORMAL_FLOOR or out[1] == 0.0


def test_contribution_requires_access():
    with pytest.raises(ValueError):
        UsageEvent(1, 0, 1, 0.0)
    with pytest.raises(ValueError):
        update_many(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), 0.0, PARAMS)


def _oracle_step(v, t_last, access, contrib, t_now):
    v = v * math.exp(-PARAMS.lambda_ * (t_now - t_last))
    if v < DENORMAL_FLOOR:
        v = 0.0
    v = v + PARAMS.alpha * access + PARAMS.beta * contrib
    return min(v, PARAMS.v_max)


def test_matches_sequential_oracle_on_random_sequences():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        v = float(rng.uniform(0.0, PARAMS.v_max))
        t = float(rng.uniform(0.0, 100.0))
        expected = v
        t_oracle = t
        for _ in range(10):
            t_now = t + float(rng.exponential(300.0))
            access = int(rng.integers(0, 2))
            contrib = access * int(rng.integers(0, 2))
            v, t = updated_value(v, t, UsageEvent(1, access, contrib, t_now), PARAMS)
            expected = _oracle_step(expected, t_oracle, access, contrib, t_now)
            t_oracle = t_now
        assert v == pytest.approx(expected, rel=1e-12, abs=1e-300)
        assert t == t_oracle


def test_batched_update_matches_scalar():
    rng = np.random.default_rng(5)
    vals = rng.uniform(0.0, 100.0, size=200)
    t_last = rng.uniform(0.0, 50.0, size=200)
    access = np.ones(200)
    contrib = (rng.random(200) < 0.5).astype(float)
    batched = update_many(vals, t_last, access, contrib, 100.0, PARAMS)
    for i in range(200):
        scalar, _ = updated_value(vals[i], t_last[i], UsageEvent(i, 1, int(contrib[i]), 100.0), PARAMS)
        assert batched[i] == pytest.approx(scalar, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(v1=values, v2=values, dt=gaps, access=st.integers(0, 1))
def test_monotone_in_value(v1, v2, dt, access):
    lo, hi = sorted((v1, v2))
    event = UsageEvent(1, access, 0, dt)
    assert updated_value(lo, 0.0, event, PARAMS)[0] <= updated_value(hi, 0.0, event, PARAMS)[0]


@settings(max_examples=200, deadline=None)
@given(v=values, dt1=gaps, dt2=gaps)
def test_nonincreasing_in_gap(v, dt1, dt2):
    short, long = sorted((dt1, dt2))
    a = updated_value(v, 0.0, UsageEvent(1, 1, 1, short), PARAMS)[0]
    b = updated_value(v, 0.0, UsageEvent(1, 1, 1, long), PARAMS)[0]
    assert b <= a * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(v1=values, v2=values, dt=gaps, lam=rates)
def test_decay_preserves_order(v1, v2, dt, lam):
    hi, lo = max(v1, v2), min(v1, v2)
    assert decay_only(hi, 0.0, dt, lam) >= decay_only(lo, 0.0, dt, lam)


@settings(max_examples=200, deadline=None)
@given(v=values, dt=gaps, access=st.integers(0, 1), contrib=st.integers(0, 1))
def test_never_exceeds_cap(v, dt, access, contrib):
    contrib = contrib * access
    assert updated_value(v, 0.0, UsageEvent(1, access, contrib, dt), PARAMS)[0] <= PARAMS.v_max


@settings(max_examples=200, deadline=None)
@given(v=values, t=gaps)
def test_idle_update_at_same_time_is_idempotent(v, t):
    once, t1 = updated_value(v, 0.0, UsageEvent(1, 0, 0, t), PARAMS)
    twice, _ = updated_value(once, t1, UsageEvent(1, 0, 0, t), PARAMS)
    assert twice == once


@settings(max_examples=200, deadline=None)
@given(v=values, dt1=gaps, dt2=gaps, lam=rates)
def test_lazy_decay_is_associative(v, dt1, dt2, lam):
    stepwise = decay_only(decay_only(v, 0.0, dt1, lam), dt1, dt1 + dt2, lam)
    direct = decay_only(v, 0.0, dt1 + dt2, lam)
    assert stepwise == pytest.approx(direct, rel=1e-12)
