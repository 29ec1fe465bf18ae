import json
from collections import Counter

import numpy as np
import pytest

from pipeline import TOPIC_TAG
from utils.datatypes import RequestKind, WorkloadSpec
from utils.errors import ParseError, SchemaError
from workload import export_trace, generate, import_trace, label_stats, split_topics


def small_spec(**overrides):
    fields = dict(seed=7, n_writes=600, n_recalls=120, n_asks=120)
    fields.update(overrides)
    return WorkloadSpec(**fields)


def test_empty_spec_yields_nothing():
    assert list(generate(WorkloadSpec(n_writes=0, n_recalls=0, n_asks=0))) == []


def test_exact_counts_and_interleaving():
    events = list(generate(small_spec()))
    counts = Counter(e.kind for e in events)
    assert counts == {RequestKind.WRITE: 600, RequestKind.RECALL: 120, RequestKind.ASK: 120}
    assert [e.index for e in events] == list(range(840))
    # no long runs of a single kind: every window of 20 events holds a query
    kinds = [e.kind for e in events]
    for start in range(0, 820, 20):
        assert any(k is not RequestKind.WRITE for k in kinds[start : start + 20])


def test_virtual_time_is_index_times_tick():
    events = list(generate(small_spec(virtual_tick=0.25)))
    assert all(e.t_virtual == e.index * 0.25 for e in events)


def test_same_seed_same_stream():
    assert list(generate(small_spec())) == list(generate(small_spec()))
    assert list(generate(small_spec())) != list(generate(small_spec(seed=8)))


def test_label_fraction():
    spec = small_spec(n_writes=5000, n_recalls=0, n_asks=0)
    events = list(generate(spec))
    stats = label_stats(events, spec.high_value_threshold)
    assert stats["writes"] == 5000
    assert stats["high_value_fraction"] == pytest.approx(0.2, abs=0.03)
    assert all(0.0 <= e.label_value <= 1.0 for e in events)


def test_high_value_labels_live_in_high_topics():
    spec = small_spec()
    high, _ = split_topics(spec, np.random.default_rng(spec.seed))
    for event in generate(spec):
        if event.kind is RequestKind.WRITE and event.label_value >= spec.high_value_threshold:
            assert event.topic in set(high.tolist())


def test_texts_carry_their_topic_tag():
    for event in generate(small_spec()):
        assert int(TOPIC_TAG.search(event.text).group(1)) == event.topic
        assert (event.label_value is None) == (event.kind is not RequestKind.WRITE)


def test_queries_reach_back_to_old_topics():
    spec = small_spec(old_reference_fraction=1.0)
    events = list(generate(spec))
    write_topics = []
    for event in events:
        if event.kind is RequestKind.WRITE:
            write_topics.append(event.topic)
        elif write_topics:
            oldest = write_topics[: max(1, len(write_topics) // 3)]
            assert event.topic in oldest


def test_trace_export_import(tmp_path):
    spec = small_spec()
    events = list(generate(spec))
    path = str(tmp_path / "trace.ndjson")
    assert export_trace(spec, events, path) == len(events)
    loaded_spec, loaded = import_trace(path)
    assert loaded_spec == spec
    assert loaded == events


def test_trace_without_header(tmp_path):
    path = tmp_path / "trace.ndjson"
    path.write_text(
        json.dumps({"index": 0, "kind": "write", "t_virtual": 0.0, "topic": 1, "text": "x"}) + "\n\n"
    )
    spec, events = import_trace(str(path))
    assert spec is None
    assert events[0].label_value is None


def test_trace_parse_error(tmp_path):
    path = tmp_path / "trace.ndjson"
    path.write_text('{"index": 0, "kind": "write", "t_virtual": 0.0, "topic": 1, "text": "x"}\n{not json\n')
    with pytest.raises(ParseError) as info:
        import_trace(str(path))
    assert info.value.line_no == 2


def test_trace_schema_errors(tmp_path):
    path = tmp_path / "trace.ndjson"
    path.write_text(json.dumps({"index": 0, "kind": "write", "t_virtual": 0.0, "topic": 1}) + "\n")
    with pytest.raises(SchemaError):
        import_trace(str(path))
    path.write_text(json.dumps({"index": 0, "kind": "delete", "t_virtual": 0.0, "topic": 1, "text": "x"}) + "\n")
    with pytest.raises(SchemaError):
        import_trace(str(path))
    path.write_text(json.dumps({"event": "trace_header", "spec": {"n_writes": -1}}) + "\n")
    with pytest.raises(SchemaError):
        import_trace(str(path))
