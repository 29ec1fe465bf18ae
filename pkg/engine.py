"""
Engine facade: one store, one policy and one pipeline, plus scheduling of the
state-touching part of each request and of background maintenance.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Set

from lifecycle import MaintenanceScheduler, TransitionQueue, lifecycle_snapshot
from memory_store import MemoryStore
from pipeline import DEFAULT_EMBED_NOISE, OrderedSlot, RequestOutcome, RetrievalPipeline
from policies import make_policy, policy_summary
from telemetry import TelemetrySink
from utils.clock import Clock
from utils.datatypes import AskRequest, ClockMode, PolicyName, RequestKind, SweepReport, ValidatedConfig
from utils.errors import AmvlError

logger = logging.getLogger(__name__)


class TurnSequencer:
    """
    Ticket gate keyed by request index.

    ``turn(i, t)`` blocks until every index below ``i`` has had its turn, so the body runs
    in trace order whatever the worker scheduling was.

    With ``due``/``dispatch`` set, maintenance owns the gate between two turns: when the
    next index has arrived with a timestamp for which ``due(t)`` holds, ``dispatch(t, done)``
    starts the work elsewhere and the gate stays closed until ``done`` is called. The
    releasing request never waits for it. The next request may; ``turn`` yields how long it
    was held up by maintenance, in microseconds.
    """

    def __init__(
        self,
        start: int = 0,
        *,
        due: Optional[Callable[[float], bool]] = None,
        dispatch: Optional[Callable[[float, Callable[[], None]], None]] = None,
    ):
        self._next = start
        self._cond = threading.Condition()
        self._due = due
        self._dispatch = dispatch
        self._arrivals: Dict[int, Optional[float]] = {}
        self._holding = False
        self._held_ns = 0
        self._held_since = 0

    @property
    def next_index(self) -> int:
        with self._cond:
            return self._next

    def waiting(self) -> List[int]:
        """Indices currently blocked at the gate"""
        with self._cond:
            return sorted(self._arrivals)

    def _maintenance_ns(self) -> int:
        held = self._held_ns
        if self._holding:
            held += Clock.wall_ns() - self._held_since
        return held

    def _hand_off(self) -> None:
        if self._holding or self._dispatch is None:
            return
        t = self._arrivals.get(self._next)
        if t is None or not self._due(t):
            return
        self._holding = True
        self._held_since = Clock.wall_ns()
        self._dispatch(t, self._maintenance_done)

    def _maintenance_done(self) -> None:
        with self._cond:
            self._held_ns += Clock.wall_ns() - self._held_since
            self._holding = False
            self._cond.notify_all()

    @contextmanager
    def turn(self, index: int, t: Optional[float] = None) -> Iterator[float]:
        with self._cond:
            if index < self._next or index in self._arrivals:
                raise ValueError(f"request index {index} already had its turn")
            self._arrivals[index] = t
            held_at_arrival = self._maintenance_ns()
            self._hand_off()
            self._cond.wait_for(lambda: self._next == index and not self._holding)
            del self._arrivals[index]
            blocked_us = (self._maintenance_ns() - held_at_arrival) / 1e3
        try:
            yield blocked_us
        finally:
            with self._cond:
                self._next = index + 1
                self._hand_off()
                self._cond.notify_all()


class AmvlEngine:
    """
    Memory engine for one policy run.

    Requests carrying a ``request_index`` pass through the TurnSequencer and see virtual
    time from the trace. Due maintenance sweeps are handed to the maintenance thread
    between two turns; a request held up by one reports that time apart from its latency.
    Requests without an index (service mode) skip the gate, run their state section
    inside one store statement, and periodic maintenance follows the wall clock.
    """

    def __init__(
        self,
        config: ValidatedConfig,
        policy: PolicyName = PolicyName.AMVL,
        *,
        seed: int = 0,
        ttl_window: Optional[float] = None,
        lru_capacity: int = 512,
        sweep_interval: float = 5.0,
        sweep_batch: int = 1024,
        transition_queue_size: int = 65536,
        max_items: Optional[int] = None,
        data_dir: Optional[str] = None,
        wal_fsync: bool = False,
        clock_mode: ClockMode = ClockMode.VIRTUAL,
        embed_noise: float = DEFAULT_EMBED_NOISE,
        telemetry: Optional[TelemetrySink] = None,
        emit_transitions: bool = True,
    ):
        self.config = config
        self.policy_name = PolicyName(policy)
        self.seed = seed
        self.sweep_interval = sweep_interval
        self.telemetry = telemetry
        self.emit_transitions = emit_transitions
        # no window means "retain for the whole run"
        self.ttl_window = ttl_window if ttl_window is not None else math.inf

        self.store = MemoryStore(
            config,
            policy=self.policy_name,
            ttl_window=self.ttl_window,
            lru_capacity=lru_capacity,
            max_items=max_items,
            data_dir=data_dir,
            wal_fsync=wal_fsync,
        )
        self.transitions = TransitionQueue(transition_queue_size)
        self.policy = make_policy(
            self.policy_name,
            config.retrieval,
            config.params,
            config.thresholds,
            run_seed=seed,
            ttl_window=self.ttl_window,
            lru_capacity=lru_capacity,
            sweep_batch=sweep_batch,
            transitions=self.transitions,
        )
        self.clock = Clock(clock_mode)
        self.sequencer = TurnSequencer(due=self._sweep_due, dispatch=self._dispatch_sweeps)
        self.scheduler = MaintenanceScheduler()
        self.pipeline = RetrievalPipeline(
            self.store,
            self.policy,
            config,
            self.clock,
            ordered=self._ordered,
            embed_seed=seed,
            embed_noise=embed_noise,
        )
        self._next_sweep_at = sweep_interval
        self._turns_taken: Set[int] = set()
        self._turns_lock = threading.Lock()
        self._counters = {"requests": 0, "errors": 0}
        self._counters_lock = threading.Lock()
        self._closed = False

    @classmethod
    def from_app(cls, app: Any, policy: PolicyName, **overrides: Any) -> "AmvlEngine":
        """Build an engine from an AppConfig section set"""
        kwargs: Dict[str, Any] = dict(
            seed=app.seed,
            ttl_window=app.policy.ttl_window,
            lru_capacity=app.policy.lru_capacity,
            sweep_interval=app.maintenance.sweep_interval,
            sweep_batch=app.maintenance.sweep_batch,
            transition_queue_size=app.maintenance.transition_queue_size,
            max_items=app.store.max_items,
            data_dir=app.store.data_dir,
            wal_fsync=app.store.wal_fsync,
            embed_noise=app.workload.embed_noise,
            emit_transitions=app.telemetry.transitions,
        )
        kwargs.update(overrides)
        return cls(app.engine_config(), policy, **kwargs)

    # ordering

    @contextmanager
    def _ordered(self, req: AskRequest) -> Iterator[OrderedSlot]:
        if req.request_index is None:
            # the timestamp is taken inside the statement so commits follow clock order
            with self.store.statement():
                if req.t_virtual is not None and self.clock.mode is ClockMode.VIRTUAL:
                    self.clock.set(max(req.t_virtual, self.clock.now()))
                yield OrderedSlot(self.clock.now())
            return
        with self.sequencer.turn(req.request_index, req.t_virtual) as blocked_us:
            with self._turns_lock:
                self._turns_taken.add(req.request_index)
            if blocked_us > 0:
                self.store.note_maintenance_wait()
            t_now = req.t_virtual if req.t_virtual is not None else self.clock.now()
            self.clock.set(t_now)
            yield OrderedSlot(t_now, blocked_us)

    def _release_turn(self, req: AskRequest) -> None:
        """Pass the gate for a request that failed before reaching its ordered section"""
        index = req.request_index
        with self._turns_lock:
            taken = index in self._turns_taken
            self._turns_taken.discard(index)
        if not taken:
            with self.sequencer.turn(index, req.t_virtual):
                pass

    def _sweep_due(self, t_now: float) -> bool:
        return self._next_sweep_at <= t_now

    def _dispatch_sweeps(self, t_now: float, done: Callable[[], None]) -> None:
        future = self.scheduler.submit(self._run_due_sweeps, t_now)
        future.add_done_callback(lambda _: done())

    def _run_due_sweeps(self, t_now: float) -> None:
        """Every sweep boundary up to ``t_now``; runs on the maintenance thread"""
        while self._next_sweep_at <= t_now:
            boundary = self._next_sweep_at
            self._next_sweep_at = boundary + self.sweep_interval
            try:
                self._sweep(boundary)
            except Exception:
                logger.exception(f"Sweep at t={boundary:.1f} failed")

    def _sweep(self, t_now: float) -> SweepReport:
        report = self.policy.maintain(self.store, t_now)
        if self.telemetry is not None:
            if self.emit_transitions:
                for transition in report.transitions:
                    record = transition.to_record()
                    record["policy"] = self.policy_name.value
                    self.telemetry.emit(record)
            self.telemetry.emit(lifecycle_snapshot(self.store, report, t_now, self.policy_name.value))
        logger.debug(f"Sweep at t={t_now:.1f}: {report.counts()}")
        return report

    def start_service(self, interval_s: float) -> None:
        """Periodic wall-clock maintenance for service mode"""
        self.scheduler.start_periodic(interval_s, lambda: self._sweep(self.clock.now()))

    def sweep_now(self) -> SweepReport:
        return self.scheduler.run(self._sweep, self.clock.now())

    # requests

    def handle(self, req: AskRequest) -> RequestOutcome:
        """
        Run one request and emit its telemetry record.

        Raises:
            AmvlError: after an error record has been emitted
        """
        handlers = {
            RequestKind.WRITE: self.pipeline.write,
            RequestKind.RECALL: self.pipeline.recall,
            RequestKind.ASK: self.pipeline.ask,
        }
        try:
            outcome = handlers[req.kind](req)
        except AmvlError as e:
            self._count("errors")
            self._emit_error(req, e)
            raise
        finally:
            self._count("requests")
            if req.request_index is not None:
                self._release_turn(req)
        if self.telemetry is not None:
            self.telemetry.emit(outcome.record)
        return outcome

    def reject(self, req: AskRequest, error: AmvlError) -> None:
        """Record a request refused before it reached the pipeline and pass its turn"""
        self._count("requests")
        self._count("errors")
        self._emit_error(req, error)
        if req.request_index is not None:
            self._release_turn(req)

    def write(self, content: str, **kwargs: Any) -> RequestOutcome:
        return self.handle(AskRequest(query_text=content, kind=RequestKind.WRITE, **kwargs))

    def recall(self, query: str, **kwargs: Any) -> RequestOutcome:
        return self.handle(AskRequest(query_text=query, kind=RequestKind.RECALL, **kwargs))

    def ask(self, query: str, **kwargs: Any) -> RequestOutcome:
        return self.handle(AskRequest(query_text=query, kind=RequestKind.ASK, **kwargs))

    def _count(self, name: str) -> None:
        with self._counters_lock:
            self._counters[name] += 1

    def _emit_error(self, req: AskRequest, error: AmvlError) -> None:
        if self.telemetry is None:
            return
        self.telemetry.emit(
            {
                "event": "request",
                "request_index": req.request_index,
                "kind": req.kind.value,
                "policy": self.policy_name.value,
                "t_virtual": req.t_virtual if req.t_virtual is not None else self.clock.now(),
                "ts_wall": time.time(),
                "latency_us": 0.0,
                "status": "error",
                "error": error.code,
            }
        )

    # introspection

    def stats(self) -> Dict[str, Any]:
        stats = self.store.stats()
        stats.update(policy_summary(self.policy))
        with self._counters_lock:
            stats.update(self._counters)
        stats["t_virtual"] = self.clock.now()
        stats["prompt_cap_n"] = self.config.retrieval.prompt_cap_n
        stats["warm_budget_k"] = self.config.retrieval.warm_budget_k
        stats["pending_transitions"] = len(self.transitions)
        stats["dropped_transitions"] = self.transitions.dropped
        return stats

    def close(self) -> Dict[str, Any]:
        """Stop maintenance, emit the run_end record and close the store"""
        if self._closed:
            return self.stats()
        self._closed = True
        self.scheduler.close()
        stats = self.stats()
        if self.telemetry is not None:
            self.telemetry.emit({"event": "run_end", **stats})
        self.store.close()
        return stats
