"""
Seeded long-running agent workload: memory writes interleaved with recall and ask
requests, topic-structured content and ground-truth value labels.

High-value items concentrate in a seeded subset of topics that queries keep revisiting.
Low-value writes drift through the remaining topics a few at a time. Queries mostly
follow recent activity and sometimes reach back to topics from the oldest writes.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from utils.datatypes import AskRequest, RequestKind, WorkloadSpec
from utils.errors import ParseError, SchemaError

logger = logging.getLogger(__name__)

LOW_LABEL_RANGE = (0.0, 0.6)

_VOCABULARY = (
    "meeting budget deadline draft review schedule travel invoice design contract "
    "client report launch metrics roadmap hiring feedback release incident backup "
    "migration vendor training policy audit forecast summary agenda ticket outage "
    "renewal pricing survey workshop prototype benchmark dataset pipeline account"
).split()

_KINDS: Tuple[RequestKind, ...] = (RequestKind.WRITE, RequestKind.RECALL, RequestKind.ASK)


@dataclass(frozen=True)
class WorkloadEvent:
    index: int
    kind: RequestKind
    t_virtual: float
    topic: int
    text: str
    label_value: Optional[float] = None
    namespace: str = "default"

    def to_record(self) -> Dict[str, object]:
        record = asdict(self)
        record["kind"] = self.kind.value
        return record

    def to_request(self) -> AskRequest:
        return AskRequest(
            query_text=self.text,
            namespace=self.namespace,
            t_virtual=self.t_virtual,
            request_index=self.index,
            kind=self.kind,
            label_value=self.label_value,
        )


def _words(rng: np.random.Generator, low: int, high: int) -> str:
    count = int(rng.integers(low, high + 1))
    return " ".join(_VOCABULARY[i] for i in rng.integers(0, len(_VOCABULARY), size=count))


def _schedule(spec: WorkloadSpec, rng: np.random.Generator) -> Iterator[RequestKind]:
    """Deficit round-robin over the three kinds; seeded jitter breaks ties"""
    totals = np.array([spec.n_writes, spec.n_recalls, spec.n_asks], dtype=np.float64)
    n_events = int(totals.sum())
    if n_events == 0:
        return
    share = totals / n_events
    emitted = np.zeros(3)
    for i in range(n_events):
        deficit = share * (i + 1) - emitted + rng.uniform(0.0, 0.25, size=3)
        deficit[emitted >= totals] = -np.inf
        pick = int(np.argmax(deficit))
        emitted[pick] += 1
        yield _KINDS[pick]


def split_topics(spec: WorkloadSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n_high = min(spec.n_topics, max(1, round(spec.high_value_fraction * spec.n_topics)))
    if spec.high_value_fraction == 0:
        n_high = 0
    high = np.sort(rng.choice(spec.n_topics, size=n_high, replace=False))
    low = np.setdiff1d(np.arange(spec.n_topics), high)
    if low.size == 0:
        low = high
    return high, low


def generate(spec: WorkloadSpec) -> Iterator[WorkloadEvent]:
    """
    Yield the event stream for ``spec``; identical seeds give identical streams.

    Event ``i`` happens at virtual time ``i * virtual_tick``.
    """
    rng = np.random.default_rng(spec.seed)
    high, low = split_topics(spec, rng)
    write_topics: List[int] = []
    hv_lo = spec.high_value_threshold

    def active_low(write_no: int) -> np.ndarray:
        position = int(write_no * low.size / max(1, spec.n_writes))
        return low[(position + np.arange(spec.low_topic_window)) % low.size]

    for i, kind in enumerate(_schedule(spec, rng)):
        t = i * spec.virtual_tick
        if kind is RequestKind.WRITE:
            # Write: high-value topic, or one of the currently active low topics
            if high.size and rng.random() < spec.high_value_fraction:
                topic = int(rng.choice(high))
                label = float(rng.uniform(hv_lo, 1.0))
            else:
                topic = int(rng.choice(active_low(len(write_topics))))
                label = float(rng.uniform(*LOW_LABEL_RANGE))
            write_topics.append(topic)
            text = f"note {len(write_topics)} [topic:{topic}] {_words(rng, 8, 24)}"
            yield WorkloadEvent(i, kind, t, topic, text, label, spec.namespace)
            continue

        # Query: an old topic, a high-value revisit, or an active low topic
        if write_topics and rng.random() < spec.old_reference_fraction:
            oldest = max(1, len(write_topics) // 3)
            topic = write_topics[int(rng.integers(0, oldest))]
        elif high.size and rng.random() < spec.revisit_bias:
            topic = int(rng.choice(high))
        else:
            topic = int(rng.choice(active_low(len(write_topics))))
        verb = "recall" if kind is RequestKind.RECALL else "what do we know about"
        text = f"{verb} [topic:{topic}] {_words(rng, 4, 12)}"
        yield WorkloadEvent(i, kind, t, topic, text, None, spec.namespace)


def label_stats(events: Iterable[WorkloadEvent], threshold: float) -> Dict[str, float]:
    labels = np.array([e.label_value for e in events if e.kind is RequestKind.WRITE])
    if labels.size == 0:
        return {"writes": 0, "high_value_fraction": 0.0, "label_mean": 0.0}
    return {
        "writes": int(labels.size),
        "high_value_fraction": float(np.mean(labels >= threshold)),
        "label_mean": float(labels.mean()),
    }


# Trace files


def export_trace(spec: WorkloadSpec, events: Iterable[WorkloadEvent], path: str) -> int:
    """Write a header line plus one NDJSON line per event; returns the event count"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"event": "trace_header", "spec": spec.model_dump()}) + "\n")
        for event in events:
            f.write(json.dumps(event.to_record()) + "\n")
            count += 1
    logger.info(f"Exported {count} trace events to {path}")
    return count


def import_trace(path: str) -> Tuple[Optional[WorkloadSpec], List[WorkloadEvent]]:
    """
    Read a trace written by ``export_trace``.

    Raises:
        ParseError: a line is not valid JSON
        SchemaError: a required field is missing or has the wrong type
    """
    spec: Optional[WorkloadSpec] = None
    events: List[WorkloadEvent] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, e.msg) from None
            if not isinstance(record, dict):
                raise ParseError(line_no, "expected a JSON object")
            if record.get("event") == "trace_header":
                try:
                    spec = WorkloadSpec.model_validate(record.get("spec", {}))
                except ValidationError:
                    raise SchemaError("spec", line_no) from None
                continue
            events.append(_event_from(record, line_no))
    return spec, events


def _event_from(record: Dict[str, object], line_no: int) -> WorkloadEvent:
    for name in ("index", "kind", "t_virtual", "topic", "text"):
        if name not in record:
            raise SchemaError(name, line_no)
    try:
        kind = RequestKind(record["kind"])
        label = record.get("label_value")
        return WorkloadEvent(
            index=int(record["index"]),
            kind=kind,
            t_virtual=float(record["t_virtual"]),
            topic=int(record["topic"]),
            text=str(record["text"]),
            label_value=float(label) if label is not None else None,
            namespace=str(record.get("namespace", "default")),
        )
    except (TypeError, ValueError):
        raise SchemaError("kind", line_no) from None
