import json

import numpy as np
import pytest

from telemetry import TelemetrySink, dumps
from utils.datatypes import Tier


def test_in_memory_records():
    sink = TelemetrySink()
    for i in range(100):
        sink.emit({"event": "request", "request_index": i})
    sink.close()
    assert [r["request_index"] for r in sink.records] == list(range(100))
    assert sink.written == 100


def test_writes_one_json_object_per_line(tmp_path):
    path = tmp_path / "nested" / "run.ndjson"
    with TelemetrySink(str(path), queue_size=4) as sink:
        for i in range(50):
            sink.emit({"event": "request", "i": np.int64(i), "v": np.float64(i / 2), "ids": np.arange(2)})
    lines = path.read_text().splitlines()
    assert len(lines) == 50
    assert json.loads(lines[3]) == {"event": "request", "i": 3, "v": 1.5, "ids": [0, 1]}


def test_closed_sink_rejects_records():
    sink = TelemetrySink()
    sink.close()
    sink.close()
    with pytest.raises(RuntimeError):
        sink.emit({"event": "request"})


def test_dumps_handles_enums_and_rejects_unknown():
    assert json.loads(dumps({"tier": Tier.WARM})) == {"tier": "warm"}
    with pytest.raises(TypeError):
        dumps({"x": object()})
