import numpy as np
import pytest

from memory_store import MemoryStore
from utils.config import validate_config
from utils.datatypes import LifecycleThresholds, PolicyName, RetrievalConfig, ValueParams


def make_config(dim=8, **overrides):
    params = ValueParams(**{k: v for k, v in overrides.items() if k in ValueParams.model_fields or k == "lambda"})
    thresholds = LifecycleThresholds(**{k: v for k, v in overrides.items() if k in LifecycleThresholds.model_fields})
    retrieval = RetrievalConfig(
        embedding_dim=dim, **{k: v for k, v in overrides.items() if k in RetrievalConfig.model_fields}
    )
    return validate_config(params, thresholds, retrieval)


def unit(dim, seed):
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


@pytest.fixture
def config():
    return make_config()


@pytest.fixture
def store(config):
    s = MemoryStore(config)
    yield s
    s.close()


@pytest.fixture
def ttl_store(config):
    s = MemoryStore(config, policy=PolicyName.TTL, ttl_window=100.0)
    yield s
    s.close()


@pytest.fixture
def lru_store(config):
    s = MemoryStore(config, policy=PolicyName.LRU, lru_capacity=2)
    yield s
    s.close()
