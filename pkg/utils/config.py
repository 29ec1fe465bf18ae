"""
Configuration loading and validation.

The Hydra document in ``configs/config.yaml`` is converted into pydantic section models.
Validation is total: every violation is collected before a single ConfigError is raised.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, List, Mapping, Optional, Union

from omegaconf import DictConfig, OmegaConf
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from utils.datatypes import (
    LifecycleThresholds,
    PolicyName,
    RetrievalConfig,
    ValidatedConfig,
    ValueParams,
    WorkloadSpec,
)
from utils.errors import ConfigError, ConfigViolation, UnknownPolicy

logger = logging.getLogger(__name__)


class MaintenanceSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sweep_interval: float = Field(default=5.0, gt=0.0)
    "Virtual seconds between maintenance sweeps."

    sweep_batch: int = Field(default=1024, ge=1)
    "Maximum number of items visited per sweep."

    transition_queue_size: int = Field(default=65536, ge=1)


class StoreSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_items: Optional[int] = Field(default=None, ge=1)
    data_dir: Optional[str] = None
    "Directory for the WAL and snapshots. None keeps the store in memory."

    wal_fsync: bool = False
    "fsync the WAL after every record, not only flush it."


class PolicySettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ttl_window: Optional[float] = Field(default=None, gt=0.0)
    "TTL retention window in seconds. None means the whole run."

    lru_capacity: int = Field(default=512, ge=1)


class ScaleCounts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_writes: int = Field(ge=0)
    n_recalls: int = Field(ge=0)
    n_asks: int = Field(ge=0)


class WorkloadSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scales: Dict[str, ScaleCounts] = Field(
        default_factory=lambda: {
            "desk": ScaleCounts(n_writes=5000, n_recalls=1000, n_asks=1000),
            "full": ScaleCounts(n_writes=50000, n_recalls=10000, n_asks=10000),
        }
    )
    n_topics: int = 50
    high_value_fraction: float = 0.2
    high_value_threshold: float = 0.8
    virtual_tick: float = 0.5
    old_reference_fraction: float = 0.3
    revisit_bias: float = 0.9
    low_topic_window: int = 2
    embed_noise: float = Field(default=0.5, ge=0.0)
    namespace: str = "default"

    def spec(self, scale: str, seed: int) -> WorkloadSpec:
        if scale not in self.scales:
            raise ConfigError(
                [ConfigViolation("scale", f"unknown scale {scale!r}, expected one of {sorted(self.scales)}")]
            )
        counts = self.scales[scale]
        return WorkloadSpec(
            seed=seed,
            n_writes=counts.n_writes,
            n_recalls=counts.n_recalls,
            n_asks=counts.n_asks,
            n_topics=self.n_topics,
            high_value_fraction=self.high_value_fraction,
            high_value_threshold=self.high_value_threshold,
            virtual_tick=self.virtual_tick,
            old_reference_fraction=self.old_reference_fraction,
            revisit_bias=self.revisit_bias,
            low_topic_window=self.low_topic_window,
            namespace=self.namespace,
        )


class TelemetrySettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    queue_size: int = Field(default=8192, ge=1)
    transitions: bool = True
    "Emit one telemetry record per applied tier transition."


class GatewaySettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    host: str = "127.0.0.1"
    port: int = Field(default=8080, ge=0)
    namespaces: List[str] = Field(default_factory=lambda: ["default"])
    workers: int = Field(default=8, ge=1)
    policy: PolicyName = PolicyName.AMVL
    telemetry_path: Optional[str] = None
    maintenance_interval_s: float = Field(default=5.0, gt=0.0)


class AppConfig(BaseModel):
    """Typed view of the whole Hydra config"""

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    scale: str = "desk"
    seed: int = 42
    out: str = "results"
    policies: List[str] = Field(default_factory=lambda: [p.value for p in PolicyName])
    workers: int = Field(default=4, ge=1)
    check: bool = False
    export_trace: Optional[str] = None
    replay: Optional[str] = None
    replay_policy: Optional[str] = None
    mode: str = Field(default="inprocess", pattern="^(inprocess|http)$")
    log_level: str = "INFO"
    log_dir: Optional[str] = None

    value: ValueParams = Field(default_factory=ValueParams)
    lifecycle: LifecycleThresholds = Field(default_factory=LifecycleThresholds)
    maintenance: MaintenanceSettings = Field(default_factory=MaintenanceSettings)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    store: StoreSettings = Field(default_factory=StoreSettings)
    policy: PolicySettings = Field(default_factory=PolicySettings)
    workload: WorkloadSettings = Field(default_factory=WorkloadSettings)
    telemetry: TelemetrySettings = Field(default_factory=TelemetrySettings)
    gateway: GatewaySettings = Field(default_factory=GatewaySettings)

    def engine_config(self) -> ValidatedConfig:
        return validate_config(self.value, self.lifecycle, self.retrieval)

    def policy_names(self) -> List[PolicyName]:
        return [parse_policy(p) for p in self.policies]


def parse_policy(name: Union[str, PolicyName]) -> PolicyName:
    if isinstance(name, PolicyName):
        return name
    try:
        return PolicyName(str(name).lower().replace("-", ""))
    except ValueError:
        raise UnknownPolicy(str(name)) from None


def validate_config(
    params: ValueParams,
    thresholds: LifecycleThresholds,
    retrieval: RetrievalConfig,
) -> ValidatedConfig:
    """
    Check every cross-field invariant of the engine configuration.

    Args:
        params: value model parameters
        thresholds: lifecycle thresholds
        retrieval: retrieval configuration

    Returns:
        The validated bundle with v_init resolved

    Raises:
        ConfigError listing every violated constraint
    """
    violations: List[ConfigViolation] = []

    for name in ("alpha", "beta", "lambda_", "v_max"):
        if not getattr(params, name) > 0:
            violations.append(ConfigViolation(name.rstrip("_"), "must be > 0"))
    if params.enforce_beta_ge_alpha and params.beta < params.alpha:
        violations.append(ConfigViolation("beta", "beta ≥ alpha"))

    v_init = thresholds.theta_h_up if params.v_init is None else params.v_init
    if not v_init > 0:
        violations.append(ConfigViolation("v_init", "must be > 0"))
    if v_init > params.v_max:
        violations.append(ConfigViolation("v_init", "v_init ≤ v_max"))

    ordered = [
        ("theta_h_up", thresholds.theta_h_up),
        ("theta_h_down", thresholds.theta_h_down),
        ("theta_w_up", thresholds.theta_w_up),
        ("theta_w_down", thresholds.theta_w_down),
        ("theta_e", thresholds.theta_e),
    ]
    for name, value in ordered:
        if value < 0:
            violations.append(ConfigViolation(name, "must be ≥ 0"))
    for (upper_name, upper), (lower_name, lower) in zip(ordered, ordered[1:]):
        if not upper > lower:
            violations.append(
                ConfigViolation("thresholds", f"ordering: {upper_name} > {lower_name}")
            )

    if retrieval.warm_budget_k < 0:
        violations.append(ConfigViolation("warm_budget_k", "must be ≥ 0"))
    if retrieval.prompt_cap_n < 1:
        violations.append(ConfigViolation("prompt_cap_n", "must be ≥ 1"))
    if retrieval.embedding_dim < 1:
        violations.append(ConfigViolation("embedding_dim", "must be ≥ 1"))
    if retrieval.conversation_turns < 0:
        violations.append(ConfigViolation("conversation_turns", "must be ≥ 0"))
    if retrieval.synthetic_delay_us_per_token < 0:
        violations.append(ConfigViolation("synthetic_delay_us_per_token", "must be ≥ 0"))

    if violations:
        raise ConfigError(violations)

    resolved = params.model_copy(update={"v_init": v_init})
    return ValidatedConfig(params=resolved, thresholds=thresholds, retrieval=retrieval)


def _violations_from(error: ValidationError) -> List[ConfigViolation]:
    violations = []
    for item in error.errors():
        loc = ".".join(str(part) for part in item.get("loc", ())) or "config"
        violations.append(ConfigViolation(loc, item.get("msg", "invalid")))
    return violations


def load_config(config: Union[DictConfig, Mapping[str, Any]]) -> AppConfig:
    """
    Build the typed application config from a Hydra/OmegaConf document.

    Unknown keys in any section are errors. The engine invariants are checked too, so a
    returned AppConfig is always runnable.
    """
    if isinstance(config, DictConfig):
        container = OmegaConf.to_container(config, resolve=True)
    else:
        container = dict(config)
    container.pop("hydra", None)
    container.pop("defaults", None)

    try:
        app = AppConfig.model_validate(container)
    except ValidationError as e:
        raise ConfigError(_violations_from(e)) from None

    app.engine_config()
    app.workload.spec(app.scale, app.seed)
    for name in app.policies:
        parse_policy(name)
    if app.replay_policy is not None:
        parse_policy(app.replay_policy)
    logger.debug(f"Loaded config sections: {sorted(container)}")
    return app
