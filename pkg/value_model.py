"""
Per-item value model: lazy exponential decay plus access/contribution reinforcement.

    V <- min(V * exp(-lambda * dt) + alpha * I_access + beta * I_contrib, V_max)

Scalar functions are used by single-item paths and tests; the ``*_many`` variants apply
the same rule to numpy columns for batched feedback and sweeps.
"""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from utils.datatypes import UsageEvent, ValueParams
from utils.errors import ClockRegression

# values below this are flushed to zero to keep long idle gaps out of denormal range
DENORMAL_FLOOR = 1e-300


def decay_only(v: float, t_last: float, t_now: float, lam: float) -> float:
    """Return ``v`` decayed from ``t_last`` to ``t_now``"""
    if t_now < t_last:
        raise ClockRegression(t_last, t_now)
    decayed = v * math.exp(-lam * (t_now - t_last))
    return 0.0 if decayed < DENORMAL_FLOOR else decayed


def updated_value(
    v: float, t_last: float, event: UsageEvent, params: ValueParams
) -> Tuple[float, float]:
    """
    Apply the unified update rule for one usage event.

    Args:
        v: current value, 0 <= v <= v_max
        t_last: timestamp of the last value update
        event: usage indicators and the current timestamp
        params: value model parameters

    Returns:
        (new value, new t_last)
    """
    decayed = decay_only(v, t_last, event.t_now, params.lambda_)
    reinforced = decayed + params.alpha * event.i_access + params.beta * event.i_contrib
    return min(reinforced, params.v_max), event.t_now


def decay_many(values: np.ndarray, t_last: np.ndarray, t_now: float, lam: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    t_last = np.asarray(t_last, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    if np.any(t_last > t_now):
        raise ClockRegression(float(t_last.max()), t_now)
    decayed = values * np.exp(-lam * (t_now - t_last))
    decayed[decayed < DENORMAL_FLOOR] = 0.0
    return decayed


def update_many(
    values: np.ndarray,
    t_last: np.ndarray,
    access: np.ndarray,
    contrib: np.ndarray,
    t_now: float,
    params: ValueParams,
) -> np.ndarray:
    access = np.asarray(access, dtype=np.float64)
    contrib = np.asarray(contrib, dtype=np.float64)
    if np.any(contrib > access):
        raise ValueError("a contributing item must also be accessed")
    decayed = decay_many(values, t_last, t_now, params.lambda_)
    return np.minimum(decayed + params.alpha * access + params.beta * contrib, params.v_max)
