from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

# Enumerations


class Tier(str, Enum):
    HOT = "hot"
    WARM = "warm"
    COLD = "cold"

    @property
    def code(self) -> int:
        return _TIER_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Tier":
        return TIER_ORDER[int(code)]


TIER_ORDER: Tuple[Tier, ...] = (Tier.HOT, Tier.WARM, Tier.COLD)
_TIER_CODES = {tier: i for i, tier in enumerate(TIER_ORDER)}


class PolicyName(str, Enum):
    TTL = "ttl"
    LRU = "lru"
    AMVL = "amvl"


# TTL, LRU, AMVL is the run order of the comparison protocol
POLICY_ORDER: Tuple[PolicyName, ...] = (PolicyName.TTL, PolicyName.LRU, PolicyName.AMVL)


class WarmMode(str, Enum):
    RANDOM = "random"
    RECENCY = "recency"


class RequestKind(str, Enum):
    WRITE = "write"
    RECALL = "recall"
    ASK = "ask"


class TransitionCause(str, Enum):
    PROMOTION = "promotion"
    DEMOTION = "demotion"
    EVICTION = "eviction"


class ClockMode(str, Enum):
    VIRTUAL = "virtual"
    WALL = "wall"


# Configuration value objects


class ValueParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    alpha: float = 1.0
    "Access reward added when an item is retrieval-touched."

    beta: float = 2.0
    "Contribution reward added when an item is injected into the prompt."

    lambda_: float = Field(default=math.log(2) / 600, alias="lambda")
    "Exponential decay rate in 1/seconds of virtual time."

    v_max: float = 100.0
    "Value cap."

    v_init: Optional[float] = None
    "Initial value of a new item. None resolves to theta_h_up during validation."

    enforce_beta_ge_alpha: bool = True
    "Require beta >= alpha. Turn off only for ablations."


class LifecycleThresholds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta_h_up: float = 5.0
    "Warm to Hot promotion threshold (inclusive)."

    theta_h_down: float = 3.0
    "Hot to Warm demotion threshold (strict)."

    theta_w_up: float = 1.0
    "Cold to Warm promotion threshold (inclusive)."

    theta_w_down: float = 0.5
    "Warm to Cold demotion threshold (strict)."

    theta_e: float = 0.1
    "Cold items strictly below this value are evicted."


class RetrievalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    warm_budget_k: int = 32
    "Number of warm items sampled into each candidate set."

    prompt_cap_n: int = 48
    "Maximum number of memory items injected into a prompt."

    warm_mode: WarmMode = WarmMode.RANDOM
    "How the warm sample is drawn."

    embedding_dim: int = 64
    "Embedding dimension D."

    conversation_turns: int = 4
    "Number of recent ask texts kept per namespace for the prompt."

    synthetic_delay_us_per_token: float = 0.0
    "Optional artificial answer latency per prompt token."


class ValidatedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    params: ValueParams
    thresholds: LifecycleThresholds
    retrieval: RetrievalConfig

    @property
    def v_init(self) -> float:
        if self.params.v_init is None:
            return self.thresholds.theta_h_up
        return self.params.v_init


# Stored items and requests


class MemoryItem(BaseModel):
    """Read-only copy of one stored record"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: int
    namespace: str
    content: str
    embedding: np.ndarray
    value: float
    t_last: float
    t_created: float
    t_last_access: Optional[float] = None
    tier: Tier
    label_value: float
    evicted: bool = False


class AskRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_text: str
    "Query text for recall/ask, content for writes."

    namespace: str = "default"

    t_virtual: Optional[float] = None
    "Virtual timestamp of the request. None uses the engine clock."

    request_index: Optional[int] = None
    "Position in the trace. Drives the ordering gate and warm sampling streams."

    kind: RequestKind = RequestKind.RECALL

    label_value: Optional[float] = None
    "Ground-truth label for writes. Never visible to eligibility policies."

    n: Optional[int] = None
    "Requested number of hits; bounded by the prompt cap."


class PromptContext(BaseModel):
    model_config = ConfigDict(frozen=True)

    system_prompt: str
    recent_conversation: List[str] = Field(default_factory=list)
    injected: List[Tuple[int, str]] = Field(default_factory=list)
    query: str = ""
    token_count: int = 0


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    n_writes: int = Field(default=5000, ge=0)
    n_recalls: int = Field(default=1000, ge=0)
    n_asks: int = Field(default=1000, ge=0)
    n_topics: int = Field(default=50, ge=1)
    high_value_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    high_value_threshold: float = Field(default=0.8, ge=0.0, le=1.0)
    virtual_tick: float = Field(default=0.5, gt=0.0)
    old_reference_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    revisit_bias: float = Field(default=0.9, ge=0.0, le=1.0)
    "Probability that a recent query revisits a high-value topic."

    low_topic_window: int = Field(default=2, ge=1)
    "Number of low-value topics receiving writes at any time."

    namespace: str = "default"

    @property
    def n_events(self) -> int:
        return self.n_writes + self.n_recalls + self.n_asks

    @property
    def interleave_ratio(self) -> Tuple[float, float, float]:
        total = self.n_events
        if total == 0:
            return (0.0, 0.0, 0.0)
        return (self.n_writes / total, self.n_recalls / total, self.n_asks / total)


# Analysis


class LatencySummary(BaseModel):
    p50: float
    p95: float
    p99: float


class RequestRecord(BaseModel):
    """Schema of one ``request`` telemetry line"""

    model_config = ConfigDict(extra="ignore")

    request_index: Optional[int] = None
    "Trace position; None for service-mode traffic."

    kind: str
    policy: str
    t_virtual: float
    ts_wall: float
    latency_us: float
    status: str = "ok"
    candidate_size: int = 0
    hot_size: int = 0
    warm_size: int = 0
    vectors_scanned: int = 0
    injected_count: int = 0
    token_count: Optional[int] = None
    bound: Optional[int] = None
    "Upper bound on candidate_size declared by the policy when R was built."

    expired: int = 0
    error: Optional[str] = None
    injected_ids: List[int] = Field(default_factory=list)
    injected_label_values: List[float] = Field(default_factory=list)
    injected_similarities: List[float] = Field(default_factory=list)
    phase_durations_us: Dict[str, float] = Field(default_factory=dict)

    maintenance_wait_us: float = 0.0
    "Time the ordering gate was held by a maintenance sweep; not part of latency_us."


class RunReport(BaseModel):
    policy: str
    requests: int = 0
    orphan_count: int = 0
    prompt_cap_n: int = 48
    warm_budget_k: Optional[int] = None

    success_rate_pct: float = 0.0
    throughput_rps: float = 0.0
    latency_ms: Optional[LatencySummary] = None
    endpoint_latency_ms: Dict[str, LatencySummary] = Field(default_factory=dict)
    pct_over_1s: float = 0.0
    pct_over_2s: float = 0.0

    retrieval_set_p95: Optional[float] = None
    retrieval_set_max: Optional[float] = None
    vectors_scanned_p95: Optional[float] = None
    vectors_scanned_p99: Optional[float] = None
    scanned_per_retrieval_mean: Optional[float] = None

    tokens_mean: Optional[float] = None
    tokens_p95: Optional[float] = None
    chunks_p95: Optional[float] = None
    memrefs_p95: Optional[float] = None

    retrieved_value_mean: Optional[float] = None
    top1_value_mean: Optional[float] = None
    value_weighted_score_mean: Optional[float] = None
    high_value_hit_rate_pct: Optional[float] = None
    high_value_share_pct: Optional[float] = None

    bound_violations: int = 0
    "Requests whose candidate set exceeded |T_H| + k (AMV-L runs only)."

    cap_violations: int = 0
    "Requests that injected more than prompt_cap_n items."

    transitions: Dict[str, int] = Field(default_factory=dict)
    request_path: Dict[str, int] = Field(default_factory=dict)

    ccdf: List[Tuple[float, float]] = Field(default_factory=list)
    throughput_timeseries: List[Tuple[float, float]] = Field(default_factory=list)
    stored_items_timeseries: List[Tuple[float, int]] = Field(default_factory=list)
    tier_timeseries: List[Dict[str, float]] = Field(default_factory=list)
    value_timeseries: List[Dict[str, float]] = Field(default_factory=list)


# Hot-path value objects


@dataclass(frozen=True)
class UsageEvent:
    item_id: int
    i_access: int
    i_contrib: int
    t_now: float

    def __post_init__(self) -> None:
        if self.i_access not in (0, 1) or self.i_contrib not in (0, 1):
            raise ValueError("usage indicators must be 0 or 1")
        if self.i_contrib and not self.i_access:
            raise ValueError("a contributing item must also be accessed")


@dataclass(frozen=True)
class TierTransition:
    item_id: int
    from_tier: Tier
    to_tier: Optional[Tier]
    value_at_transition: float
    t: float
    cause: TransitionCause

    def to_record(self) -> Dict[str, object]:
        return {
            "event": "transition",
            "item_id": self.item_id,
            "from_tier": self.from_tier.value,
            "to_tier": self.to_tier.value if self.to_tier is not None else None,
            "value": self.value_at_transition,
            "t_virtual": self.t,
            "cause": self.cause.value,
        }


@dataclass
class SweepReport:
    decayed: int = 0
    demoted: int = 0
    promoted: int = 0
    evicted: int = 0
    visited: int = 0
    cursor: int = 0
    queue_applied: int = 0
    transitions: List[TierTransition] = field(default_factory=list)
    value_summary: Dict[str, float] = field(default_factory=dict)

    def counts(self) -> Dict[str, int]:
        return {
            "decayed": self.decayed,
            "demoted": self.demoted,
            "promoted": self.promoted,
            "evicted": self.evicted,
        }


@dataclass(frozen=True, eq=False)
class CandidateSet:
    ids: np.ndarray
    hot_part: np.ndarray
    warm_part: np.ndarray
    policy: PolicyName
    built_at: float
    expired: int = 0

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class ScanResult:
    hits: List[Tuple[int, float]]
    vectors_scanned: int

    @property
    def ids(self) -> List[int]:
        return [item_id for item_id, _ in self.hits]
