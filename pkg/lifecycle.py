"""
Tier lifecycle: hysteresis tier mapping, usage updates and background maintenance.

Request handlers only compute values and queue tier changes. Tier migrations and
evictions are applied by ``maintenance_sweep`` on the maintenance thread.
"""

from __future__ import annotations

import logging
import queue
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional

import numpy as np

from utils.datatypes import (
    LifecycleThresholds,
    SweepReport,
    Tier,
    TierTransition,
    TransitionCause,
    UsageEvent,
    ValueParams,
)
from value_model import decay_many, update_many, updated_value

if TYPE_CHECKING:
    from memory_store import MemoryStore

logger = logging.getLogger(__name__)

HOT, WARM, COLD = Tier.HOT.code, Tier.WARM.code, Tier.COLD.code


def initial_tier(v: float, thresholds: LifecycleThresholds) -> Tier:
    """Tier of a newly written item; plain threshold comparison, no hysteresis"""
    if v >= thresholds.theta_h_up:
        return Tier.HOT
    if v >= thresholds.theta_w_up:
        return Tier.WARM
    return Tier.COLD


def next_tier(current: Tier, v: float, thresholds: LifecycleThresholds) -> Tier:
    """
    One hysteresis step from ``current`` given value ``v``.

    Up-thresholds are inclusive, down-thresholds strict. The result is at most one tier
    away from ``current``.
    """
    if current is Tier.HOT:
        return Tier.WARM if v < thresholds.theta_h_down else Tier.HOT
    if current is Tier.WARM:
        if v >= thresholds.theta_h_up:
            return Tier.HOT
        if v < thresholds.theta_w_down:
            return Tier.COLD
        return Tier.WARM
    return Tier.WARM if v >= thresholds.theta_w_up else Tier.COLD


def next_tier_codes(
    codes: np.ndarray, values: np.ndarray, thresholds: LifecycleThresholds
) -> np.ndarray:
    """Vectorized ``next_tier`` over tier codes"""
    codes = np.asarray(codes, dtype=np.int8)
    out = codes.copy()
    out[(codes == HOT) & (values < thresholds.theta_h_down)] = WARM
    warm = codes == WARM
    out[warm & (values >= thresholds.theta_h_up)] = HOT
    out[warm & (values < thresholds.theta_w_down)] = COLD
    out[(codes == COLD) & (values >= thresholds.theta_w_up)] = WARM
    return out


def transition_cause(from_tier: Tier, to_tier: Tier) -> TransitionCause:
    if to_tier.code < from_tier.code:
        return TransitionCause.PROMOTION
    return TransitionCause.DEMOTION


class TransitionQueue:
    """Bounded multi-producer queue of pending tier changes; overflow is dropped"""

    def __init__(self, maxsize: int = 65536):
        self._queue: "queue.Queue[TierTransition]" = queue.Queue(maxsize=maxsize)
        self.dropped = 0
        self._lock = threading.Lock()

    def put(self, transition: TierTransition) -> bool:
        try:
            self._queue.put_nowait(transition)
            return True
        except queue.Full:
            # the next sweep that visits the item recomputes its tier from value
            with self._lock:
                self.dropped += 1
            return False

    def drain(self) -> List[TierTransition]:
        drained = []
        while True:
            try:
                drained.append(self._queue.get_nowait())
            except queue.Empty:
                return drained

    def __len__(self) -> int:
        return self._queue.qsize()


def apply_usage(
    store: "MemoryStore",
    event: UsageEvent,
    params: ValueParams,
    thresholds: LifecycleThresholds,
    transitions: Optional[TransitionQueue] = None,
) -> Optional[TierTransition]:
    """
    Update one item's value for a usage event and queue any resulting tier change.

    Returns:
        The queued transition, or None when the tier is unchanged
    """
    with store.statement():
        value, t_last, tier = store.item_state(event.item_id)
        v_new, t_new = updated_value(value, t_last, event, params)
        store.write_usage(
            np.array([event.item_id], dtype=np.int64),
            np.array([v_new]),
            t_new,
            accessed=bool(event.i_access),
        )
    target = next_tier(tier, v_new, thresholds)
    if target is tier:
        return None
    transition = TierTransition(
        event.item_id, tier, target, v_new, event.t_now, transition_cause(tier, target)
    )
    if transitions is not None:
        transitions.put(transition)
    return transition


def apply_usage_batch(
    store: Any,
    ids: np.ndarray,
    contrib: np.ndarray,
    t_now: float,
    params: ValueParams,
    thresholds: LifecycleThresholds,
    transitions: Optional[TransitionQueue] = None,
) -> List[TierTransition]:
    """
    Access update for every id in ``ids``, plus contribution where ``contrib`` is set.

    ``store`` is a MemoryStore or a label-free PolicyView over one.
    """
    ids = np.asarray(ids, dtype=np.int64)
    contrib = np.asarray(contrib, dtype=bool)
    with store.statement():
        live = store.live_mask(ids)
        ids, contrib = ids[live], contrib[live]
        values, t_last, codes = store.usage_state(ids)
        new_values = update_many(
            values, t_last, np.ones(ids.shape[0]), contrib.astype(np.float64), t_now, params
        )
        store.write_usage(ids, new_values, t_now, accessed=True)

    targets = next_tier_codes(codes, new_values, thresholds)
    queued = []
    for pos in np.flatnonzero(targets != codes):
        from_tier, to_tier = Tier.from_code(codes[pos]), Tier.from_code(targets[pos])
        transition = TierTransition(
            int(ids[pos]),
            from_tier,
            to_tier,
            float(new_values[pos]),
            t_now,
            transition_cause(from_tier, to_tier),
        )
        if transitions is not None:
            transitions.put(transition)
        queued.append(transition)
    return queued


def _reconcile(
    store: "MemoryStore",
    ids: np.ndarray,
    t_now: float,
    params: ValueParams,
    thresholds: LifecycleThresholds,
    report: SweepReport,
) -> np.ndarray:
    """Decay, re-tier and evict one batch; returns the decayed values"""
    with store.statement():
        live = store.live_mask(ids)
        ids = ids[live]
        values, t_last, codes = store.usage_state(ids)
        # touched after this sweep started; nothing to decay yet
        settled = t_last <= t_now
        ids, values, t_last, codes = ids[settled], values[settled], t_last[settled], codes[settled]
        decayed = decay_many(values, t_last, t_now, params.lambda_)
        store.write_usage(ids, decayed, t_now, accessed=False)
    report.decayed += int(ids.shape[0])

    targets = next_tier_codes(codes, decayed, thresholds)
    for pos in np.flatnonzero(targets != codes):
        item_id = int(ids[pos])
        from_tier, to_tier = Tier.from_code(codes[pos]), Tier.from_code(targets[pos])
        if not store.try_update(item_id, tier=to_tier):
            continue
        cause = transition_cause(from_tier, to_tier)
        if cause is TransitionCause.PROMOTION:
            report.promoted += 1
        else:
            report.demoted += 1
        report.transitions.append(
            TierTransition(item_id, from_tier, to_tier, float(decayed[pos]), t_now, cause)
        )

    for pos in np.flatnonzero((targets == COLD) & (decayed < thresholds.theta_e)):
        item_id = int(ids[pos])
        if not store.try_evict(item_id, t_now):
            continue
        report.evicted += 1
        report.transitions.append(
            TierTransition(
                item_id, Tier.COLD, None, float(decayed[pos]), t_now, TransitionCause.EVICTION
            )
        )
    return decayed


def maintenance_sweep(
    store: "MemoryStore",
    t_now: float,
    params: ValueParams,
    thresholds: LifecycleThresholds,
    sweep_batch: int,
    transitions: Optional[TransitionQueue] = None,
) -> SweepReport:
    """
    Visit queued items and up to ``sweep_batch`` items from the round-robin cursor.

    Each visit decays the value to ``t_now``, applies one hysteresis step and evicts
    Cold items strictly below theta_e. Items evicted mid-sweep are skipped.
    """
    report = SweepReport()
    store.note_sweep()

    values: List[np.ndarray] = []
    pending = np.empty(0, dtype=np.int64)
    if transitions is not None:
        drained = transitions.drain()
        if drained:
            pending = np.array(
                list(dict.fromkeys(t.item_id for t in drained)), dtype=np.int64
            )
            report.queue_applied = int(pending.shape[0])
            values.append(_reconcile(store, pending, t_now, params, thresholds, report))

    batch, cursor = store.live_ids_from(store.sweep_cursor, sweep_batch)
    store.sweep_cursor = cursor
    report.cursor = cursor
    if pending.size:
        batch = batch[~np.isin(batch, pending)]
    if batch.size:
        values.append(_reconcile(store, batch, t_now, params, thresholds, report))

    report.visited = report.decayed
    report.value_summary = value_summary(np.concatenate(values) if values else np.empty(0))
    return report


def value_summary(values: np.ndarray) -> Dict[str, float]:
    if values.size == 0:
        return {"min": 0.0, "p50": 0.0, "p90": 0.0, "max": 0.0}
    p50, p90 = np.percentile(values, [50, 90], method="inverted_cdf")
    return {
        "min": float(values.min()),
        "p50": float(p50),
        "p90": float(p90),
        "max": float(values.max()),
    }


def lifecycle_snapshot(
    store: "MemoryStore", report: SweepReport, t_now: float, policy: str
) -> Dict[str, Any]:
    """Telemetry record emitted after each sweep"""
    counts = store.counts()
    return {
        "event": "lifecycle_snapshot",
        "policy": policy,
        "t_virtual": t_now,
        "hot": counts["hot"],
        "warm": counts["warm"],
        "cold": counts["cold"],
        "stored": counts["stored"],
        "evicted_total": counts["evicted"],
        "evicted": report.evicted,
        "promoted": report.promoted,
        "demoted": report.demoted,
        "visited": report.visited,
        "cursor": report.cursor,
        "values": report.value_summary or value_summary(np.empty(0)),
    }


class MaintenanceScheduler:
    """
    Single background thread of control for lifecycle work.

    ``submit`` hands one task to the maintenance thread, ``run`` also waits for it.
    ``start_periodic`` schedules a task on a fixed wall-clock interval for service mode.
    """

    def __init__(self, name: str = "amvl-maintenance"):
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=name)
        self._stop = threading.Event()
        self._ticker: Optional[threading.Thread] = None

    def submit(self, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> Future:
        return self._executor.submit(fn, *args, **kwargs)

    def run(self, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> Any:
        return self.submit(fn, *args, **kwargs).result()

    def start_periodic(self, interval_s: float, fn: Callable[[], Any]) -> None:
        if self._ticker is not None:
            return

        def _tick() -> None:
            while not self._stop.wait(interval_s):
                try:
                    self.run(fn)
                except Exception:
                    logger.exception("Periodic maintenance failed")

        self._ticker = threading.Thread(target=_tick, name="amvl-maintenance-timer", daemon=True)
        self._ticker.start()
        logger.info(f"Periodic maintenance every {interval_s:.1f}s")

    def close(self) -> None:
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(timeout=5)
            self._ticker = None
        self._executor.shutdown(wait=True)
