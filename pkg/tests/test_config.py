import os

import pytest
from omegaconf import OmegaConf

from utils.config import load_config, parse_policy, validate_config
from utils.datatypes import LifecycleThresholds, PolicyName, RetrievalConfig, ValueParams
from utils.errors import ConfigError, UnknownPolicy

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "config.yaml")


def test_default_configuration_is_valid():
    cfg = validate_config(
        ValueParams(alpha=1.0, beta=2.0, **{"lambda": 0.001155}, v_max=100.0),
        LifecycleThresholds(),
        RetrievalConfig(warm_budget_k=32, prompt_cap_n=48),
    )
    assert cfg.v_init == 5.0
    assert cfg.params.v_init == 5.0
    assert cfg.retrieval.prompt_cap_n == 48


def test_beta_below_alpha_is_rejected():
    with pytest.raises(ConfigError) as info:
        validate_config(ValueParams(alpha=1.0, beta=0.5), LifecycleThresholds(), RetrievalConfig())
    assert [(v.field, v.constraint) for v in info.value.violations] == [("beta", "beta ≥ alpha")]


def test_beta_below_alpha_allowed_for_ablation():
    cfg = validate_config(
        ValueParams(alpha=1.0, beta=0.5, enforce_beta_ge_alpha=False), LifecycleThresholds(), RetrievalConfig()
    )
    assert cfg.params.beta == 0.5


def test_threshold_ordering_is_rejected():
    with pytest.raises(ConfigError) as info:
        validate_config(ValueParams(), LifecycleThresholds(theta_h_down=6.0), RetrievalConfig())
    assert "thresholds" in info.value.fields
    assert any("ordering" in v.constraint for v in info.value.violations)


def test_every_violation_is_reported():
    with pytest.raises(ConfigError) as info:
        validate_config(
            ValueParams(alpha=-1.0, v_max=1.0),
            LifecycleThresholds(theta_e=-0.1),
            RetrievalConfig(prompt_cap_n=0, warm_budget_k=-1),
        )
    fields = set(info.value.fields)
    assert {"alpha", "v_init", "theta_e", "prompt_cap_n", "warm_budget_k"} <= fields


def test_lambda_key_round_trips():
    params = ValueParams.model_validate({"lambda": 0.01})
    assert params.lambda_ == 0.01
    assert ValueParams.model_validate(params.model_dump(by_alias=True)) == params


def test_load_config_from_yaml():
    cfg = OmegaConf.load(CONFIG_PATH)
    app = load_config(cfg)
    assert app.policy_names() == [PolicyName.TTL, PolicyName.LRU, PolicyName.AMVL]
    assert app.value.lambda_ == pytest.approx(0.01155)
    assert app.retrieval.prompt_cap_n == 48
    spec = app.workload.spec("desk", 7)
    assert (spec.n_writes, spec.n_recalls, spec.n_asks) == (5000, 1000, 1000)
    assert spec.seed == 7


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError) as info:
        load_config({"retrieval": {"prompt_cap": 48}})
    assert any("prompt_cap" in f for f in info.value.fields)


def test_unknown_scale_is_an_error():
    app = load_config({})
    with pytest.raises(ConfigError):
        app.workload.spec("huge", 0)


def test_parse_policy():
    assert parse_policy("AMV-L") is PolicyName.AMVL
    assert parse_policy("ttl") is PolicyName.TTL
    with pytest.raises(UnknownPolicy):
        parse_policy("fifo")
    with pytest.raises(UnknownPolicy):
        load_config({"policies": ["ttl", "fifo"]})
