"""
Retrieval eligibility policies: AMV-L tiers, TTL retention and an LRU working set.

Every policy builds the per-request candidate set R and consumes feedback about which
candidates were selected. Policies work on a PolicyView, which has no access to labels.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from typing import Dict, Optional, Sequence

import numpy as np

from lifecycle import TransitionQueue, apply_usage_batch, maintenance_sweep
from memory_store import MemoryStore, PolicyView
from utils.datatypes import (
    CandidateSet,
    LifecycleThresholds,
    PolicyName,
    RetrievalConfig,
    SweepReport,
    Tier,
    ValueParams,
    WarmMode,
)
from utils.errors import FeedbackOutsideCandidates

logger = logging.getLogger(__name__)

_EMPTY = np.empty(0, dtype=np.int64)


def request_rng(run_seed: int, request_index: int) -> np.random.Generator:
    """Counter-based stream for one request, independent of scheduling order"""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(run_seed), int(request_index)]))
    )


def build_candidates_amvl(
    view: PolicyView,
    cfg: RetrievalConfig,
    rng: np.random.Generator,
    t_now: float,
) -> CandidateSet:
    """R = all of T_H plus at most k warm items"""
    with view.statement():
        hot = view.tier_ids(Tier.HOT)
        warm = view.tier_ids(Tier.WARM)
        k = min(cfg.warm_budget_k, warm.shape[0])
        if k == 0:
            warm_part = _EMPTY
        elif cfg.warm_mode is WarmMode.RANDOM:
            warm_part = warm[rng.choice(warm.shape[0], size=k, replace=False)]
        else:
            last_used = view.last_used(warm)
            # most recent first, lower id on ties
            warm_part = warm[np.lexsort((warm, -last_used))[:k]]
    return CandidateSet(
        ids=np.concatenate([hot, warm_part]),
        hot_part=hot,
        warm_part=warm_part,
        policy=PolicyName.AMVL,
        built_at=t_now,
    )


def build_candidates_ttl(view: PolicyView, ttl_window: float, t_now: float) -> CandidateSet:
    if not ttl_window > 0:
        raise ValueError("ttl_window must be > 0")
    with view.statement():
        expired = view.expire(t_now)
        ids = view.ttl_ids()
    return CandidateSet(
        ids=ids,
        hot_part=_EMPTY,
        warm_part=_EMPTY,
        policy=PolicyName.TTL,
        built_at=t_now,
        expired=len(expired),
    )


def build_candidates_lru(view: PolicyView, capacity: int, t_now: float) -> CandidateSet:
    if capacity < 1:
        raise ValueError("capacity must be > 0")
    ids = view.lru_working_set(capacity)
    return CandidateSet(
        ids=ids, hot_part=_EMPTY, warm_part=_EMPTY, policy=PolicyName.LRU, built_at=t_now
    )


def check_feedback(selected: Sequence[int], touched: np.ndarray) -> None:
    selected = np.asarray(selected, dtype=np.int64)
    outside = selected[~np.isin(selected, touched)]
    if outside.size:
        raise FeedbackOutsideCandidates(outside.tolist())


class EligibilityPolicy(ABC):
    """Candidate building and feedback for one benchmark run"""

    name: PolicyName

    def __init__(self, retrieval: RetrievalConfig):
        self.retrieval = retrieval

    @abstractmethod
    def build(self, view: PolicyView, t_now: float, request_index: int) -> CandidateSet:
        ...

    def on_feedback(
        self,
        view: PolicyView,
        selected: Sequence[int],
        touched: CandidateSet,
        t_now: float,
    ) -> None:
        """
        Record which candidates were used.

        Args:
            view: label-free store view
            selected: injected ids S, similarity descending
            touched: the candidate set R the selection was drawn from
            t_now: virtual time of the request
        """
        check_feedback(selected, touched.ids)
        self._feedback(view, selected, touched, t_now)

    def _feedback(
        self, view: PolicyView, selected: Sequence[int], touched: CandidateSet, t_now: float
    ) -> None:
        pass

    def maintain(self, store: MemoryStore, t_now: float) -> SweepReport:
        """Background lifecycle work for one sweep interval; runs on the maintenance thread"""
        store.note_sweep()
        return SweepReport()

    def bound(self, candidates: CandidateSet) -> Optional[int]:
        """Upper bound on |R| that held when ``candidates`` was built"""
        return None


class AmvlPolicy(EligibilityPolicy):
    name = PolicyName.AMVL

    def __init__(
        self,
        retrieval: RetrievalConfig,
        params: ValueParams,
        thresholds: LifecycleThresholds,
        *,
        run_seed: int = 0,
        sweep_batch: int = 1024,
        transitions: Optional[TransitionQueue] = None,
    ):
        super().__init__(retrieval)
        self.params = params
        self.thresholds = thresholds
        self.run_seed = run_seed
        self.sweep_batch = sweep_batch
        self.transitions = transitions if transitions is not None else TransitionQueue()

    def build(self, view: PolicyView, t_now: float, request_index: int) -> CandidateSet:
        rng = request_rng(self.run_seed, request_index)
        return build_candidates_amvl(view, self.retrieval, rng, t_now)

    def _feedback(
        self, view: PolicyView, selected: Sequence[int], touched: CandidateSet, t_now: float
    ) -> None:
        contrib = np.isin(touched.ids, np.asarray(selected, dtype=np.int64))
        apply_usage_batch(
            view, touched.ids, contrib, t_now, self.params, self.thresholds, self.transitions
        )

    def maintain(self, store: MemoryStore, t_now: float) -> SweepReport:
        return maintenance_sweep(
            store, t_now, self.params, self.thresholds, self.sweep_batch, self.transitions
        )

    def bound(self, candidates: CandidateSet) -> Optional[int]:
        return int(candidates.hot_part.shape[0]) + self.retrieval.warm_budget_k


class TtlPolicy(EligibilityPolicy):
    name = PolicyName.TTL

    def __init__(self, retrieval: RetrievalConfig, ttl_window: float):
        super().__init__(retrieval)
        self.ttl_window = ttl_window

    def build(self, view: PolicyView, t_now: float, request_index: int) -> CandidateSet:
        return build_candidates_ttl(view, self.ttl_window, t_now)

    def maintain(self, store: MemoryStore, t_now: float) -> SweepReport:
        report = SweepReport()
        store.note_sweep()
        report.evicted = len(store.expire(t_now))
        return report


class LruPolicy(EligibilityPolicy):
    name = PolicyName.LRU

    def __init__(self, retrieval: RetrievalConfig, capacity: int):
        super().__init__(retrieval)
        self.capacity = capacity

    def build(self, view: PolicyView, t_now: float, request_index: int) -> CandidateSet:
        return build_candidates_lru(view, self.capacity, t_now)

    def _feedback(
        self, view: PolicyView, selected: Sequence[int], touched: CandidateSet, t_now: float
    ) -> None:
        # R\S keeps its relative order; S follows, best hit last so it becomes MRU
        selected = [int(i) for i in selected]
        chosen = set(selected)
        order = touched.ids[::-1]
        rest = [int(i) for i in order if int(i) not in chosen]
        view.lru_touch(rest + selected[::-1], t_now)

    def bound(self, candidates: CandidateSet) -> Optional[int]:
        return self.capacity


def make_policy(
    name: PolicyName,
    retrieval: RetrievalConfig,
    params: ValueParams,
    thresholds: LifecycleThresholds,
    *,
    run_seed: int = 0,
    ttl_window: Optional[float] = None,
    lru_capacity: int = 512,
    sweep_batch: int = 1024,
    transitions: Optional[TransitionQueue] = None,
) -> EligibilityPolicy:
    if name is PolicyName.AMVL:
        return AmvlPolicy(
            retrieval,
            params,
            thresholds,
            run_seed=run_seed,
            sweep_batch=sweep_batch,
            transitions=transitions,
        )
    if name is PolicyName.TTL:
        if ttl_window is None:
            raise ValueError("a TTL policy needs a resolved ttl_window")
        return TtlPolicy(retrieval, ttl_window)
    return LruPolicy(retrieval, lru_capacity)


def policy_summary(policy: EligibilityPolicy) -> Dict[str, object]:
    summary: Dict[str, object] = {"policy": policy.name.value}
    if isinstance(policy, AmvlPolicy):
        summary["warm_budget_k"] = policy.retrieval.warm_budget_k
        summary["warm_mode"] = policy.retrieval.warm_mode.value
    elif isinstance(policy, TtlPolicy):
        summary["ttl_window"] = policy.ttl_window if math.isfinite(policy.ttl_window) else None
    elif isinstance(policy, LruPolicy):
        summary["lru_capacity"] = policy.capacity
    return summary
