"""
Exception hierarchy shared by the store, lifecycle, retrieval and analysis layers.

Every error carries a machine-readable ``code`` so the gateway and the harness can
report it without string matching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional


class AmvlError(Exception):
    """Base class for all engine errors"""

    code = "amvl_error"


@dataclass(frozen=True)
class ConfigViolation:
    field: str
    constraint: str

    def __str__(self) -> str:
        return f"{self.field}: {self.constraint}"


class ConfigError(AmvlError):
    """Raised with the complete list of violated configuration constraints"""

    code = "config_error"

    def __init__(self, violations: Iterable[ConfigViolation]):
        self.violations: List[ConfigViolation] = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations) or "invalid config")

    @property
    def fields(self) -> List[str]:
        return [v.field for v in self.violations]


class UnknownPolicy(ConfigError):
    code = "unknown_policy"

    def __init__(self, name: str):
        self.name = name
        super().__init__(
            [ConfigViolation("policy", f"unknown policy {name!r}, expected ttl, lru or amvl")]
        )


class DimensionMismatch(AmvlError):
    code = "dimension_mismatch"

    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected dimension {expected}, got {got}")


class StorageFull(AmvlError):
    code = "storage_full"

    def __init__(self, max_items: int):
        self.max_items = max_items
        super().__init__(f"store holds the maximum of {max_items} items")


class NotFound(AmvlError):
    code = "not_found"

    def __init__(self, item_id: int):
        self.item_id = item_id
        super().__init__(f"item {item_id} does not exist")


class Evicted(AmvlError):
    code = "evicted"

    def __init__(self, item_id: int):
        self.item_id = item_id
        super().__init__(f"item {item_id} has been evicted")


class EvictionPreconditionError(AmvlError):
    code = "eviction_precondition"

    def __init__(self, item_id: int, reason: str):
        self.item_id = item_id
        self.reason = reason
        super().__init__(f"cannot evict item {item_id}: {reason}")


class CorruptSnapshot(AmvlError):
    code = "corrupt_snapshot"


class DuplicateId(AmvlError):
    code = "duplicate_id"

    def __init__(self, item_id: int):
        self.item_id = item_id
        super().__init__(f"vector for item {item_id} is already indexed")


class ClockRegression(AmvlError):
    code = "clock_regression"

    def __init__(self, t_last: float, t_now: float):
        self.t_last = t_last
        self.t_now = t_now
        super().__init__(f"clock moved backwards: t_now={t_now} < t_last={t_last}")


class FeedbackOutsideCandidates(AmvlError):
    code = "feedback_outside_candidates"

    def __init__(self, item_ids: Iterable[int]):
        self.item_ids = sorted(int(i) for i in item_ids)
        super().__init__(f"selected ids not in candidate set: {self.item_ids[:10]}")


class EmptySamples(AmvlError):
    code = "empty_samples"

    def __init__(self) -> None:
        super().__init__("percentile of an empty sample list")


class ParseError(AmvlError):
    code = "parse_error"

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class SchemaError(AmvlError):
    code = "schema_error"

    def __init__(self, field: str, line_no: Optional[int] = None):
        self.field = field
        self.line_no = line_no
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"missing or invalid field {field!r}{where}")


class MissingMetric(AmvlError):
    code = "missing_metric"

    def __init__(self, metric: str, policy: str):
        self.metric = metric
        self.policy = policy
        super().__init__(f"report for {policy} has no metric {metric!r}")


class CapExceeded(AmvlError):
    code = "cap_exceeded"

    def __init__(self, requested: int, cap: int):
        self.requested = requested
        self.cap = cap
        super().__init__(f"requested n={requested} exceeds the prompt cap {cap}")


class UnknownNamespace(AmvlError):
    code = "unknown_namespace"

    def __init__(self, namespace: str):
        self.namespace = namespace
        super().__init__(f"namespace {namespace!r} is not allowed")


class EmptyContent(AmvlError):
    code = "empty_content"

    def __init__(self) -> None:
        super().__init__("content must not be empty")
