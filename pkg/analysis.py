"""
Offline telemetry analysis.

Everything here is a pure function of the NDJSON files written during a run:
per-policy RunReports, the five comparison tables, acceptance checks and CSV exports
for plotting.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError
from rich.console import Console
from rich.table import Table

from utils.datatypes import LatencySummary, POLICY_ORDER, PolicyName, RequestRecord, RunReport
from utils.errors import EmptySamples, MissingMetric, ParseError, SchemaError

logger = logging.getLogger(__name__)

RETRIEVAL_KINDS = ("recall", "ask")
THROUGHPUT_BUCKET_S = 10.0
FOOTPRINT_QUANTILES = tuple(range(0, 101))


def percentile(samples: Sequence[float], p: float) -> float:
    """
    Nearest-rank percentile: the ceil(p/100 * N)-th smallest sample, rank clamped to [1, N].

    Raises:
        EmptySamples: ``samples`` is empty
    """
    if not 0 <= p <= 100:
        raise ValueError(f"percentile {p} outside [0, 100]")
    ordered = np.sort(np.asarray(samples, dtype=np.float64))
    n = ordered.shape[0]
    if n == 0:
        raise EmptySamples()
    rank = min(max(math.ceil(p * n / 100), 1), n)
    return float(ordered[rank - 1])


def _maybe_percentile(samples: Sequence[float], p: float) -> Optional[float]:
    return percentile(samples, p) if len(samples) else None


def _mean(samples: Sequence[float]) -> Optional[float]:
    return float(np.mean(samples)) if len(samples) else None


def latency_summary(latencies_us: Sequence[float]) -> Optional[LatencySummary]:
    if not len(latencies_us):
        return None
    return LatencySummary(
        p50=percentile(latencies_us, 50) / 1e3,
        p95=percentile(latencies_us, 95) / 1e3,
        p99=percentile(latencies_us, 99) / 1e3,
    )


def ccdf_points(latencies_ms: Sequence[float]) -> List[Tuple[float, float]]:
    """(x, P(latency > x)) at every distinct latency, x ascending"""
    values = np.sort(np.asarray(latencies_ms, dtype=np.float64))
    n = values.shape[0]
    if n == 0:
        return []
    distinct = np.unique(values)
    greater = n - np.searchsorted(values, distinct, side="right")
    return [(float(x), float(g / n)) for x, g in zip(distinct, greater)]


def ccdf_at(points: Sequence[Tuple[float, float]], x: float) -> float:
    """Evaluate a CCDF step function produced by ``ccdf_points``"""
    result = 1.0
    for value, prob in points:
        if value > x:
            break
        result = prob
    return result


# Loading


@dataclass
class TelemetryLog:
    requests: List[RequestRecord] = field(default_factory=list)
    snapshots: List[Dict[str, Any]] = field(default_factory=list)
    transitions: List[Dict[str, Any]] = field(default_factory=list)
    run_end: Dict[str, Any] = field(default_factory=dict)
    orphan_count: int = 0
    health_dropped: int = 0


def load_telemetry(path: str) -> TelemetryLog:
    """
    Parse one policy's NDJSON telemetry file.

    Raises:
        ParseError: a line is not a JSON object
        SchemaError: a request record lacks a required field
    """
    log = TelemetryLog()
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
            event = record.get("event")
            if event == "request":
                if record.get("kind") == "health":
                    log.health_dropped += 1
                    continue
                try:
                    log.requests.append(RequestRecord.model_validate(record))
                except ValidationError as e:
                    loc = e.errors()[0].get("loc", ("record",))
                    raise SchemaError(str(loc[0]), line_no) from None
            elif event == "lifecycle_snapshot":
                log.snapshots.append(record)
            elif event == "transition":
                log.transitions.append(record)
            elif event == "run_end":
                log.run_end = record
            else:
                log.orphan_count += 1
    log.requests.sort(key=lambda r: (r.request_index is None, r.request_index or 0, r.ts_wall))
    return log


# Reports


def summarize(
    log: TelemetryLog,
    *,
    policy: Optional[str] = None,
    prompt_cap_n: Optional[int] = None,
    high_value_threshold: float = 0.8,
) -> RunReport:
    """Compute every RunReport field from a loaded telemetry log"""
    requests = log.requests
    if policy is None:
        policy = requests[0].policy if requests else str(log.run_end.get("policy", "unknown"))
    cap = prompt_cap_n or int(log.run_end.get("prompt_cap_n", 48))
    ok = [r for r in requests if r.status == "ok"]
    retrievals = [r for r in ok if r.kind in RETRIEVAL_KINDS]
    asks = [r for r in ok if r.kind == "ask"]

    # latency and throughput over successful requests only
    latencies = [r.latency_us for r in ok]
    span = max(r.ts_wall for r in ok) - min(r.ts_wall for r in ok) if ok else 0.0

    endpoint = {}
    for kind in ("write", "recall", "ask"):
        summary = latency_summary([r.latency_us for r in ok if r.kind == kind])
        if summary is not None:
            endpoint[kind] = summary

    # quality reads the labels the pipeline copied into the record
    injected_labels = [v for r in retrievals for v in r.injected_label_values]
    with_hits = [r for r in retrievals if r.injected_label_values]
    scanned_ratio = [r.vectors_scanned / r.candidate_size for r in retrievals if r.candidate_size > 0]
    weighted = [
        sum(s * v for s, v in zip(r.injected_similarities, r.injected_label_values)) / cap
        for r in retrievals
    ]

    # lifecycle
    transitions: Dict[str, int] = {"promotion": 0, "demotion": 0, "eviction": 0}
    for record in log.transitions:
        cause = str(record.get("cause"))
        transitions[cause] = transitions.get(cause, 0) + 1

    ccdf = ccdf_points([latency / 1e3 for latency in latencies])

    return RunReport(
        policy=policy,
        requests=len(requests),
        orphan_count=log.orphan_count,
        prompt_cap_n=cap,
        warm_budget_k=log.run_end.get("warm_budget_k") if policy == PolicyName.AMVL.value else None,
        success_rate_pct=100.0 * len(ok) / len(requests) if requests else 0.0,
        throughput_rps=len(ok) / span if span > 0 else 0.0,
        latency_ms=latency_summary(latencies),
        endpoint_latency_ms=endpoint,
        pct_over_1s=100.0 * sum(1 for x in latencies if x > 1e6) / len(latencies) if latencies else 0.0,
        pct_over_2s=100.0 * sum(1 for x in latencies if x > 2e6) / len(latencies) if latencies else 0.0,
        retrieval_set_p95=_maybe_percentile([r.candidate_size for r in retrievals], 95),
        retrieval_set_max=float(max(r.candidate_size for r in retrievals)) if retrievals else None,
        vectors_scanned_p95=_maybe_percentile([r.vectors_scanned for r in retrievals], 95),
        vectors_scanned_p99=_maybe_percentile([r.vectors_scanned for r in retrievals], 99),
        scanned_per_retrieval_mean=_mean(scanned_ratio),
        tokens_mean=_mean([r.token_count for r in asks if r.token_count is not None]),
        tokens_p95=_maybe_percentile([r.token_count for r in asks if r.token_count is not None], 95),
        chunks_p95=_maybe_percentile([r.injected_count for r in retrievals], 95),
        memrefs_p95=_maybe_percentile([len(r.injected_ids) for r in asks], 95),
        retrieved_value_mean=_mean(injected_labels),
        top1_value_mean=_mean([r.injected_label_values[0] for r in with_hits]),
        value_weighted_score_mean=_mean(weighted),
        high_value_hit_rate_pct=(
            100.0
            * sum(1 for r in retrievals if any(v >= high_value_threshold for v in r.injected_label_values))
            / len(retrievals)
            if retrievals
            else None
        ),
        high_value_share_pct=(
            100.0 * sum(1 for v in injected_labels if v >= high_value_threshold) / len(injected_labels)
            if injected_labels
            else None
        ),
        bound_violations=sum(1 for r in ok if r.bound is not None and r.candidate_size > r.bound),
        cap_violations=sum(1 for r in ok if r.injected_count > cap),
        transitions=transitions,
        request_path={k: int(v) for k, v in log.run_end.get("request_path", {}).items()},
        ccdf=ccdf,
        throughput_timeseries=_throughput_series(ok),
        stored_items_timeseries=[(float(s["t_virtual"]), int(s["stored"])) for s in log.snapshots],
        tier_timeseries=[
            {"t_virtual": float(s["t_virtual"]), **{k: float(s[k]) for k in ("hot", "warm", "cold", "stored")}}
            for s in log.snapshots
        ],
        value_timeseries=[
            {"t_virtual": float(s["t_virtual"]), **{k: float(v) for k, v in s.get("values", {}).items()}}
            for s in log.snapshots
        ],
    )


def _throughput_series(ok: Sequence[RequestRecord]) -> List[Tuple[float, float]]:
    if not ok:
        return []
    stamps = np.array([r.ts_wall for r in ok])
    offsets = stamps - stamps.min()
    buckets = np.floor(offsets / THROUGHPUT_BUCKET_S).astype(np.int64)
    counts = np.bincount(buckets)
    return [(float(i * THROUGHPUT_BUCKET_S), float(c / THROUGHPUT_BUCKET_S)) for i, c in enumerate(counts)]


def analyze(
    path: str,
    *,
    prompt_cap_n: Optional[int] = None,
    high_value_threshold: float = 0.8,
) -> RunReport:
    """Load ``path`` and compute its RunReport"""
    log = load_telemetry(path)
    report = summarize(log, prompt_cap_n=prompt_cap_n, high_value_threshold=high_value_threshold)
    logger.info(
        f"Analyzed {report.requests} requests for {report.policy} "
        f"({log.orphan_count} orphaned, {log.health_dropped} health records dropped)"
    )
    return report


# Comparison


class Direction(str, Enum):
    HIGHER = "↑"
    LOWER = "↓"
    CONSTANT = "="


@dataclass(frozen=True)
class MetricSpec:
    key: str
    label: str
    direction: Direction
    wall_clock: bool = False
    required: bool = False


def _endpoint_p95(kind: str):
    def read(report: RunReport) -> Optional[float]:
        summary = report.endpoint_latency_ms.get(kind)
        return summary.p95 if summary is not None else None

    return read


def _latency(field_name: str):
    def read(report: RunReport) -> Optional[float]:
        return getattr(report.latency_ms, field_name) if report.latency_ms is not None else None

    return read


TABLES: Tuple[Tuple[str, Tuple[MetricSpec, ...]], ...] = (
    (
        "End-to-end latency and throughput",
        (
            MetricSpec("success_rate_pct", "Success rate (%)", Direction.HIGHER),
            MetricSpec("throughput_rps", "Throughput (req/s)", Direction.HIGHER, wall_clock=True, required=True),
            MetricSpec("latency_p50", "Latency p50 (ms)", Direction.LOWER, wall_clock=True, required=True),
            MetricSpec("latency_p95", "Latency p95 (ms)", Direction.LOWER, wall_clock=True, required=True),
            MetricSpec("latency_p99", "Latency p99 (ms)", Direction.LOWER, wall_clock=True, required=True),
            MetricSpec("pct_over_1s", "Requests > 1 s (%)", Direction.LOWER, wall_clock=True),
            MetricSpec("pct_over_2s", "Requests > 2 s (%)", Direction.LOWER, wall_clock=True),
        ),
    ),
    (
        "Endpoint latency p95",
        (
            MetricSpec("write_p95", "Write p95 (ms)", Direction.LOWER, wall_clock=True),
            MetricSpec("recall_p95", "Recall p95 (ms)", Direction.LOWER, wall_clock=True),
            MetricSpec("ask_p95", "Ask p95 (ms)", Direction.LOWER, wall_clock=True),
        ),
    ),
    (
        "Retrieval footprint",
        (
            MetricSpec("retrieval_set_p95", "Retrieval set p95 (|R|)", Direction.LOWER, required=True),
            MetricSpec("retrieval_set_max", "Retrieval set max (|R|)", Direction.LOWER),
            MetricSpec("vectors_scanned_p95", "Vectors scanned p95", Direction.LOWER, required=True),
            MetricSpec("vectors_scanned_p99", "Vectors scanned p99", Direction.LOWER),
            MetricSpec("scanned_per_retrieval_mean", "Scanned per retrieval mean", Direction.CONSTANT),
        ),
    ),
    (
        "Prompt cost",
        (
            MetricSpec("tokens_mean", "Tokens/request mean", Direction.LOWER),
            MetricSpec("tokens_p95", "Tokens/request p95", Direction.LOWER),
            MetricSpec("chunks_p95", "Chunks/request p95", Direction.CONSTANT),
            MetricSpec("memrefs_p95", "Memory refs/request p95", Direction.CONSTANT),
        ),
    ),
    (
        "Retrieval quality",
        (
            MetricSpec("retrieved_value_mean", "Retrieved value mean", Direction.HIGHER),
            MetricSpec("top1_value_mean", "Top-1 value mean", Direction.HIGHER),
            MetricSpec("value_weighted_score_mean", "Value-weighted score mean", Direction.HIGHER),
            MetricSpec("high_value_hit_rate_pct", "High-value hit rate (%)", Direction.HIGHER),
            MetricSpec("high_value_share_pct", "High-value retrieved share (%)", Direction.HIGHER),
        ),
    ),
)

# Published TTL/LRU/AMV-L figures for the same metrics, shown next to measured ratios
PUBLISHED: Dict[str, Dict[str, float]] = {
    "success_rate_pct": {"ttl": 100.0, "lru": 99.997, "amvl": 100.0},
    "throughput_rps": {"ttl": 9.027, "lru": 38.169, "amvl": 36.977},
    "latency_p50": {"ttl": 814.730, "lru": 153.810, "amvl": 194.080},
    "latency_p95": {"ttl": 4503.743, "lru": 921.556, "amvl": 950.409},
    "latency_p99": {"ttl": 5398.167, "lru": 1452.706, "amvl": 1233.430},
    "pct_over_1s": {"ttl": 39.632, "lru": 3.960, "amvl": 3.653},
    "pct_over_2s": {"ttl": 13.813, "lru": 0.343, "amvl": 0.007},
    "write_p95": {"ttl": 1382.852, "lru": 261.531, "amvl": 282.521},
    "recall_p95": {"ttl": 2379.380, "lru": 464.091, "amvl": 455.381},
    "ask_p95": {"ttl": 5544.570, "lru": 1553.594, "amvl": 1289.564},
    "retrieval_set_p95": {"ttl": 4824.0, "lru": 261.0, "amvl": 690.0},
    "vectors_scanned_p95": {"ttl": 4824.0, "lru": 261.0, "amvl": 690.0},
    "scanned_per_retrieval_mean": {"ttl": 1.0, "lru": 1.0, "amvl": 1.0},
    "tokens_mean": {"ttl": 646.761, "lru": 716.782, "amvl": 675.388},
    "tokens_p95": {"ttl": 4730.0, "lru": 5298.0, "amvl": 4954.0},
    "chunks_p95": {"ttl": 48.0, "lru": 48.0, "amvl": 48.0},
    "memrefs_p95": {"ttl": 48.0, "lru": 48.0, "amvl": 48.0},
    "retrieved_value_mean": {"ttl": 0.714, "lru": 0.949, "amvl": 0.947},
    "top1_value_mean": {"ttl": 0.740, "lru": 0.930, "amvl": 0.945},
    "value_weighted_score_mean": {"ttl": 0.235, "lru": 0.209, "amvl": 0.212},
    "high_value_hit_rate_pct": {"ttl": 99.375, "lru": 99.960, "amvl": 99.935},
    "high_value_share_pct": {"ttl": 42.683, "lru": 92.325, "amvl": 92.816},
}

# headline AMV-L vs TTL factors quoted with the figures; throughput's 3.1 disagrees with its own row
STATED_GAINS: Dict[str, float] = {
    "throughput_rps": 3.1,
    "latency_p50": 4.2,
    "latency_p95": 4.7,
    "latency_p99": 4.4,
}


def published_ratio(key: str) -> Optional[float]:
    """Published AMV-L/TTL ratio for ``key``"""
    figures = PUBLISHED.get(key)
    if figures is None or figures["ttl"] == 0:
        return None
    return figures["amvl"] / figures["ttl"]


_READERS = {
    "latency_p50": _latency("p50"),
    "latency_p95": _latency("p95"),
    "latency_p99": _latency("p99"),
    "write_p95": _endpoint_p95("write"),
    "recall_p95": _endpoint_p95("recall"),
    "ask_p95": _endpoint_p95("ask"),
}


def metric_value(report: RunReport, key: str) -> Optional[float]:
    if key in _READERS:
        return _READERS[key](report)
    if key not in RunReport.model_fields:
        raise MissingMetric(key, report.policy)
    value = getattr(report, key)
    return float(value) if value is not None else None


class ComparisonRow(BaseModel):
    metric: str
    label: str
    direction: str
    wall_clock: bool
    values: Dict[str, Optional[float]]
    ratio_vs_reference: Dict[str, Optional[float]]
    published_ratio: Optional[float] = None
    "Published AMV-L/TTL ratio for the metric."

    stated_gain: Optional[float] = None
    "Headline AMV-L over TTL factor quoted with the published figures."


class ComparisonTable(BaseModel):
    title: str
    rows: List[ComparisonRow]


class Comparison(BaseModel):
    policies: List[str]
    reference: str
    tables: List[ComparisonTable]
    acceptance: List[Dict[str, Any]] = Field(default_factory=list)

    def without_wall_clock(self) -> Dict[str, Any]:
        """The deterministic part: every row not derived from wall-clock time"""
        data = self.model_dump()
        for table in data["tables"]:
            table["rows"] = [row for row in table["rows"] if not row["wall_clock"]]
        data["acceptance"] = [a for a in data["acceptance"] if not a.get("wall_clock")]
        return data


def _ordered_policies(reports: Mapping[str, RunReport]) -> List[str]:
    known = [p.value for p in POLICY_ORDER if p.value in reports]
    return known + sorted(p for p in reports if p not in known)


def compare(reports: Mapping[str, RunReport]) -> Comparison:
    """
    Lay the reports out as the five comparison tables with ratios against TTL.

    Raises:
        ValueError: fewer than two reports
        MissingMetric: a required metric is absent from a report
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    policies = _ordered_policies(reports)
    reference = PolicyName.TTL.value if PolicyName.TTL.value in reports else policies[0]

    tables = []
    for title, specs in TABLES:
        rows = []
        for spec in specs:
            values = {}
            for name in policies:
                value = metric_value(reports[name], spec.key)
                if value is None and spec.required:
                    raise MissingMetric(spec.key, name)
                values[name] = value
            base = values[reference]
            ratios = {
                name: (value / base if value is not None and base not in (None, 0.0) else None)
                for name, value in values.items()
            }
            rows.append(
                ComparisonRow(
                    metric=spec.key,
                    label=spec.label,
                    direction=spec.direction.value,
                    wall_clock=spec.wall_clock,
                    values=values,
                    ratio_vs_reference=ratios,
                    published_ratio=published_ratio(spec.key),
                    stated_gain=STATED_GAINS.get(spec.key),
                )
            )
        tables.append(ComparisonTable(title=title, rows=rows))
    return Comparison(policies=policies, reference=reference, tables=tables)


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    if float(value).is_integer() and abs(value) < 1e9:
        return f"{value:.0f}"
    return f"{value:.3f}"


def _published_cell(row: ComparisonRow) -> str:
    if row.published_ratio is None:
        return "-"
    cell = f"{row.published_ratio:.3f}"
    if row.stated_gain is not None:
        cell += f" ({row.stated_gain:g}× stated)"
    return cell


def render_tables(comparison: Comparison, width: int = 120) -> str:
    """Aligned text rendering of the comparison tables"""
    console = Console(file=io.StringIO(), width=width, color_system=None)
    for table_data in comparison.tables:
        table = Table(title=table_data.title, title_justify="left")
        table.add_column("Metric")
        table.add_column("Dir", justify="center")
        for name in comparison.policies:
            table.add_column(name.upper(), justify="right")
        for name in comparison.policies:
            if name != comparison.reference:
                table.add_column(f"{name.upper()}/{comparison.reference.upper()}", justify="right")
        table.add_column("Published AMVL/TTL", justify="right")
        for row in table_data.rows:
            cells = [row.label, row.direction]
            cells += [_fmt(row.values[name]) for name in comparison.policies]
            cells += [
                _fmt(row.ratio_vs_reference[name])
                for name in comparison.policies
                if name != comparison.reference
            ]
            cells.append(_published_cell(row))
            table.add_row(*cells)
        console.print(table)
    return console.file.getvalue()


# Acceptance


class AcceptanceResult(BaseModel):
    name: str
    passed: Optional[bool]
    "None when the reports needed for the check are absent."

    detail: str = ""
    wall_clock: bool = False


def _ratio(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None or b == 0:
        return None
    return a / b


def check_acceptance(reports: Mapping[str, RunReport]) -> List[AcceptanceResult]:
    """Evaluate the run-level acceptance criteria that telemetry can decide"""
    ttl = reports.get(PolicyName.TTL.value)
    lru = reports.get(PolicyName.LRU.value)
    amvl = reports.get(PolicyName.AMVL.value)
    three = ttl is not None and lru is not None and amvl is not None
    results: List[AcceptanceResult] = []

    if amvl is None:
        results.append(AcceptanceResult(name="eligibility_bound", passed=None, detail="no amvl run"))
    else:
        results.append(
            AcceptanceResult(
                name="eligibility_bound",
                passed=amvl.bound_violations == 0 and amvl.requests > 0,
                detail=f"{amvl.bound_violations} requests exceeded |T_H| + k",
            )
        )

    if not three:
        results.append(AcceptanceResult(name="footprint_ordering", passed=None, detail="needs ttl, lru and amvl"))
        results.append(AcceptanceResult(name="retrieval_quality", passed=None, detail="needs ttl, lru and amvl"))
    else:
        r_ttl, r_lru, r_amvl = ttl.retrieval_set_p95, lru.retrieval_set_p95, amvl.retrieval_set_p95
        s_ttl, s_lru, s_amvl = ttl.vectors_scanned_p95, lru.vectors_scanned_p95, amvl.vectors_scanned_p95
        ordering = None not in (r_ttl, r_lru, r_amvl, s_ttl, s_lru, s_amvl) and (
            r_lru < r_amvl < r_ttl and s_lru < s_amvl < s_ttl
        )
        ttl_amvl, ttl_lru = _ratio(r_ttl, r_amvl), _ratio(r_ttl, r_lru)
        footprint = bool(ordering) and (ttl_amvl or 0) >= 3.0 and (ttl_lru or 0) >= 5.0
        results.append(
            AcceptanceResult(
                name="footprint_ordering",
                passed=footprint,
                detail=f"p95 |R| lru={_fmt(r_lru)} amvl={_fmt(r_amvl)} ttl={_fmt(r_ttl)}; "
                f"ttl/amvl={_fmt(ttl_amvl)} ttl/lru={_fmt(ttl_lru)}",
            )
        )

        v_ttl, v_lru, v_amvl = ttl.retrieved_value_mean, lru.retrieved_value_mean, amvl.retrieved_value_mean
        h_ttl, h_lru, h_amvl = ttl.high_value_share_pct, lru.high_value_share_pct, amvl.high_value_share_pct
        quality = None not in (v_ttl, v_lru, v_amvl, h_ttl, h_lru, h_amvl) and (
            v_amvl >= 1.2 * v_ttl
            and v_lru >= 1.2 * v_ttl
            and abs(v_amvl - v_lru) <= 0.02 * v_lru
            and h_amvl >= 1.5 * h_ttl
            and h_lru >= 1.5 * h_ttl
        )
        results.append(
            AcceptanceResult(
                name="retrieval_quality",
                passed=bool(quality),
                detail=f"value mean ttl={_fmt(v_ttl)} lru={_fmt(v_lru)} amvl={_fmt(v_amvl)}; "
                f"high-value share ttl={_fmt(h_ttl)} lru={_fmt(h_lru)} amvl={_fmt(h_amvl)}",
            )
        )

    over_cap = {name: r.cap_violations for name, r in reports.items() if r.cap_violations}
    chunks = {name: r.chunks_p95 for name, r in reports.items()}
    results.append(
        AcceptanceResult(
            name="cap_invariance",
            passed=not over_cap
            and all(c is None or c <= r.prompt_cap_n for c, r in zip(chunks.values(), reports.values())),
            detail=f"chunks p95 {', '.join(f'{k}={_fmt(v)}' for k, v in chunks.items())}",
        )
    )

    if ttl is None or amvl is None:
        results.append(AcceptanceResult(name="tail_direction", passed=None, detail="needs ttl and amvl"))
    else:
        p99_ttl = ttl.latency_ms.p99 if ttl.latency_ms else None
        p99_amvl = amvl.latency_ms.p99 if amvl.latency_ms else None
        latency_ratio = _ratio(p99_ttl, p99_amvl)
        scan_ratio = _ratio(ttl.vectors_scanned_p99, amvl.vectors_scanned_p99)
        results.append(
            AcceptanceResult(
                name="tail_direction",
                passed=(latency_ratio or 0) >= 2.0 or (scan_ratio or 0) >= 3.0,
                wall_clock=True,
                detail=f"p99 latency ttl/amvl={_fmt(latency_ratio)}; p99 scanned ttl/amvl={_fmt(scan_ratio)}",
            )
        )

    # expirations belong to the TTL baseline itself; waits on a held gate execute nothing
    not_work = {"expirations", "maintenance_waits"}
    leaks = {
        name: {k: v for k, v in r.request_path.items() if k not in not_work and v}
        for name, r in reports.items()
    }
    leaks = {name: counts for name, counts in leaks.items() if counts}
    waits = {name: r.request_path.get("maintenance_waits", 0) for name, r in reports.items()}
    results.append(
        AcceptanceResult(
            name="request_path_isolation",
            passed=not leaks,
            detail=(
                f"no lifecycle work inside requests; gate waits on maintenance: {waits}"
                if not leaks
                else f"lifecycle work inside requests: {leaks}"
            ),
        )
    )
    return results


def acceptance_passed(results: Sequence[AcceptanceResult]) -> bool:
    return all(r.passed is not False for r in results)


# CSV exports


def export_csvs(log: TelemetryLog, report: RunReport, out_dir: str) -> List[str]:
    """Per-request, CCDF, throughput, footprint and tier CSVs for one policy"""
    os.makedirs(out_dir, exist_ok=True)
    policy = report.policy
    written = []

    rows = [
        {
            "request_index": r.request_index,
            "kind": r.kind,
            "status": r.status,
            "t_virtual": r.t_virtual,
            "ts_wall": r.ts_wall,
            "latency_ms": r.latency_us / 1e3,
            "candidate_size": r.candidate_size,
            "hot_size": r.hot_size,
            "warm_size": r.warm_size,
            "vectors_scanned": r.vectors_scanned,
            "injected_count": r.injected_count,
            "token_count": r.token_count,
            **{f"phase_{k}_us": v for k, v in r.phase_durations_us.items()},
        }
        for r in log.requests
    ]
    frames = {
        f"requests_{policy}.csv": pd.DataFrame(rows),
        f"ccdf_{policy}.csv": pd.DataFrame(report.ccdf, columns=["latency_ms", "ccdf"]),
        f"throughput_{policy}.csv": pd.DataFrame(
            report.throughput_timeseries, columns=["wall_offset_s", "requests_per_s"]
        ),
        f"tiers_{policy}.csv": pd.DataFrame(report.tier_timeseries),
    }

    retrievals = [r for r in log.requests if r.kind in RETRIEVAL_KINDS and r.status == "ok"]
    if retrievals:
        sizes = [r.candidate_size for r in retrievals]
        scanned = [r.vectors_scanned for r in retrievals]
        frames[f"footprint_{policy}.csv"] = pd.DataFrame(
            {
                "quantile": FOOTPRINT_QUANTILES,
                "candidate_size": [percentile(sizes, q) for q in FOOTPRINT_QUANTILES],
                "vectors_scanned": [percentile(scanned, q) for q in FOOTPRINT_QUANTILES],
            }
        )

    for name, frame in frames.items():
        path = os.path.join(out_dir, name)
        frame.to_csv(path, index=False)
        written.append(path)
    return written
