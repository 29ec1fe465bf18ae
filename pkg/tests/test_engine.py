import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from engine import AmvlEngine, TurnSequencer
from telemetry import TelemetrySink
from tests.conftest import make_config
from utils.datatypes import AskRequest, ClockMode, PolicyName, RequestKind
from utils.errors import CapExceeded


def trace(n, tick=1.0):
    """Writes on topics 0..4 with a recall after every third write"""
    requests = []
    for i in range(n):
        kind = RequestKind.RECALL if i % 3 == 2 else RequestKind.WRITE
        requests.append(
            AskRequest(
                query_text=f"[topic:{i % 5}] event {i}",
                kind=kind,
                t_virtual=i * tick,
                request_index=i,
                label_value=0.5 if kind is RequestKind.WRITE else None,
            )
        )
    return requests


def run(engine, requests, workers=4):
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(engine.handle, requests))


def test_turn_sequencer_orders_by_index():
    sequencer = TurnSequencer()
    seen = []

    def enter(index):
        with sequencer.turn(index):
            seen.append(index)

    threads = [threading.Thread(target=enter, args=(i,)) for i in reversed(range(8))]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert seen == list(range(8))
    with pytest.raises(ValueError):
        with sequencer.turn(3):
            pass


def test_sweeps_run_at_virtual_boundaries():
    sink = TelemetrySink()
    engine = AmvlEngine(make_config(), sweep_interval=5.0, telemetry=sink)
    run(engine, trace(21))
    engine.close()
    sink.close()
    snapshots = [r["t_virtual"] for r in sink.records if r["event"] == "lifecycle_snapshot"]
    assert snapshots == [5.0, 10.0, 15.0, 20.0]
    assert engine.store.sweeps_total == 4


def test_lifecycle_work_stays_off_the_request_path():
    engine = AmvlEngine(make_config(**{"lambda": 0.5}), sweep_interval=2.0, sweep_batch=8)
    run(engine, trace(120))
    stats = engine.close()
    assert stats["sweeps"] > 0
    assert stats["evicted"] > 0
    path = stats["request_path"]
    assert (path["migrations"], path["evictions"], path["sweeps"], path["expirations"]) == (0, 0, 0, 0)


def test_concurrent_runs_are_identical():
    def content(workers):
        sink = TelemetrySink()
        engine = AmvlEngine(make_config(), seed=3, sweep_interval=4.0, telemetry=sink)
        run(engine, trace(90), workers)
        engine.close()
        sink.close()
        keep = ("request_index", "kind", "candidate_size", "injected_ids", "item_id")
        return sorted(
            (tuple(str(r.get(k)) for k in keep) for r in sink.records if r["event"] == "request"),
        )

    assert content(1) == content(8)


def test_failed_request_passes_its_turn():
    sink = TelemetrySink()
    engine = AmvlEngine(make_config(prompt_cap_n=2), telemetry=sink)
    with pytest.raises(CapExceeded):
        engine.recall("too many", request_index=0, n=3)
    engine.reject(AskRequest(query_text="", request_index=1), CapExceeded(9, 2))
    outcome = engine.write("[topic:1] still served", request_index=2, t_virtual=1.0)
    assert outcome.item_id == 1
    stats = engine.close()
    sink.close()
    assert stats["requests"] == 3 and stats["errors"] == 2
    errors = [r for r in sink.records if r.get("status") == "error"]
    assert [r["error"] for r in errors] == [CapExceeded.code, CapExceeded.code]


def test_close_emits_run_end():
    sink = TelemetrySink()
    engine = AmvlEngine(make_config(), policy=PolicyName.LRU, lru_capacity=4, telemetry=sink)
    engine.write("[topic:0] a")
    engine.close()
    assert engine.close()["stored"] == 1
    sink.close()
    end = [r for r in sink.records if r["event"] == "run_end"]
    assert len(end) == 1
    assert end[0]["policy"] == "lru" and end[0]["lru_capacity"] == 4


def test_ttl_engine_without_window_keeps_everything():
    engine = AmvlEngine(make_config(), policy=PolicyName.TTL)
    for i in range(10):
        engine.write(f"[topic:{i}] w", t_virtual=float(i * 1000))
    outcome = engine.recall("[topic:1] w", t_virtual=1e6)
    assert outcome.candidates.size == 10
    engine.close()


def test_unordered_requests_follow_their_timestamps():
    engine = AmvlEngine(make_config())
    engine.write("[topic:0] first", t_virtual=10.0)
    engine.write("[topic:0] late", t_virtual=4.0)
    assert engine.clock.now() == 10.0
    assert engine.store.get(2).t_created == 10.0
    engine.close()


def slow_maintenance(engine, seconds):
    maintain = engine.policy.maintain

    def slow(store, t_now):
        time.sleep(seconds)
        return maintain(store, t_now)

    engine.policy.maintain = slow


def request_records(sink):
    return {r["request_index"]: r for r in sink.records if r["event"] == "request"}


def test_recall_latency_excludes_sweep_time():
    sink = TelemetrySink()
    engine = AmvlEngine(make_config(), sweep_interval=5.0, telemetry=sink)
    slow_maintenance(engine, 0.3)
    engine.write("[topic:0] first", request_index=0, t_virtual=0.0)
    engine.recall("[topic:0] first", request_index=1, t_virtual=6.0)
    stats = engine.close()
    sink.close()

    recall = request_records(sink)[1]
    assert recall["latency_us"] < 0.2e6
    assert recall["maintenance_wait_us"] >= 0.25e6
    assert stats["sweeps"] == 1
    path = stats["request_path"]
    assert (path["migrations"], path["evictions"], path["sweeps"]) == (0, 0, 0)
    assert path["maintenance_waits"] == 1


def test_releasing_request_hands_off_without_waiting():
    sink = TelemetrySink()
    engine = AmvlEngine(make_config(), sweep_interval=5.0, telemetry=sink)
    slow_maintenance(engine, 0.3)
    waiter = threading.Thread(
        target=engine.recall, args=("[topic:0] first",), kwargs={"request_index": 1, "t_virtual": 6.0}
    )
    waiter.start()
    deadline = time.monotonic() + 5.0
    while engine.sequencer.waiting() != [1] and time.monotonic() < deadline:
        time.sleep(0.001)
    assert engine.sequencer.waiting() == [1]

    engine.write("[topic:0] first", request_index=0, t_virtual=0.0)
    waiter.join()
    engine.close()
    sink.close()

    records = request_records(sink)
    assert records[0]["latency_us"] < 0.2e6
    assert records[0]["maintenance_wait_us"] == 0.0
    assert records[1]["maintenance_wait_us"] >= 0.25e6
    assert records[1]["latency_us"] < 0.2e6


def test_wall_clock_recalls_run_concurrently():
    engine = AmvlEngine(make_config(), clock_mode=ClockMode.WALL)
    for i in range(20):
        engine.write(f"[topic:{i % 5}] note {i}")
    engine.start_service(0.005)

    def recalls(worker):
        for i in range(500):
            engine.recall(f"[topic:{(worker + i) % 5}] note")

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(recalls, range(8)))
    stats = engine.close()
    assert stats["errors"] == 0
    assert stats["requests"] == 4020
