import threading

import numpy as np
import pytest

from memory_store import MemoryStore
from tests.conftest import make_config, unit
from utils.datatypes import PolicyName, Tier
from utils.errors import (
    CorruptSnapshot,
    DimensionMismatch,
    Evicted,
    EvictionPreconditionError,
    NotFound,
    StorageFull,
)


def fill(store, n, t=0.0):
    return [store.put(f"note {i}", unit(store.dim, i), 0.5, t) for i in range(n)]


def test_put_on_empty_store(store, config):
    item_id = store.put("first note", unit(8, 1), 0.9, 0.0)
    assert item_id == 1
    item = store.get(1)
    assert item.tier is Tier.HOT
    assert item.value == config.v_init
    assert item.t_last_access is None
    assert np.linalg.norm(item.embedding) == pytest.approx(1.0)
    assert store.counts() == {"hot": 1, "warm": 0, "cold": 0, "stored": 1, "evicted": 0, "total": 1}


def test_put_rejects_wrong_dimension(store):
    with pytest.raises(DimensionMismatch):
        store.put("bad", np.ones(5), 0.1, 0.0)
    assert store.count_live() == 0


def test_storage_full(config):
    store = MemoryStore(config, max_items=2)
    fill(store, 2)
    with pytest.raises(StorageFull):
        store.put("third", unit(8, 3), 0.1, 0.0)
    assert store.count_live() == 2


def test_ids_are_never_reused(store):
    fill(store, 2)
    store.update_item_atomic(2, tier=Tier.COLD)
    store.evict(2, 1.0)
    assert store.put("again", unit(8, 9), 0.1, 1.0) == 3


def test_update_moves_tier_index_with_value(store):
    fill(store, 3)
    item = store.update_item_atomic(2, value=2.0, tier=Tier.WARM, t_last=4.0)
    assert item.tier is Tier.WARM and item.value == 2.0 and item.t_last == 4.0
    assert sorted(store.tier_ids(Tier.WARM).tolist()) == [2]
    assert sorted(store.tier_ids(Tier.HOT).tolist()) == [1, 3]
    assert store.check_partition()


def test_update_unknown_and_evicted(store):
    fill(store, 1)
    with pytest.raises(NotFound):
        store.update_item_atomic(5, value=1.0)
    store.update_item_atomic(1, tier=Tier.COLD)
    store.evict(1, 0.0)
    with pytest.raises(Evicted):
        store.update_item_atomic(1, value=1.0)
    with pytest.raises(Evicted):
        store.get(1)
    assert store.try_update(1, value=1.0) is False


def test_update_rejects_value_outside_cap(store):
    fill(store, 1)
    with pytest.raises(ValueError):
        store.update_item_atomic(1, value=1e9)
    assert store.get(1).value == store.config.v_init


def test_amvl_evicts_only_cold(store):
    fill(store, 1)
    with pytest.raises(EvictionPreconditionError):
        store.evict(1, 0.0)
    assert store.try_evict(1, 0.0) is False
    store.update_item_atomic(1, tier=Tier.COLD)
    store.evict(1, 0.0)
    assert not store.is_live(1)
    assert store.counts()["evicted"] == 1
    assert not store.vectors.contains(1)
    assert store.check_partition()


def test_ttl_evicts_only_expired(ttl_store):
    fill(ttl_store, 1, t=10.0)
    with pytest.raises(EvictionPreconditionError):
        ttl_store.evict(1, 109.0)
    ttl_store.evict(1, 110.0)
    assert ttl_store.ttl_ids().tolist() == []


def test_ttl_expire_from_queue_head(ttl_store):
    ttl_store.put("a", unit(8, 1), 0.1, 0.0)
    ttl_store.put("b", unit(8, 2), 0.1, 50.0)
    ttl_store.put("c", unit(8, 3), 0.1, 60.0)
    assert ttl_store.expire(100.0) == [1]
    assert ttl_store.expire(155.0) == [2]
    assert ttl_store.ttl_ids().tolist() == [3]


def test_lru_evicts_only_outside_working_set(lru_store):
    fill(lru_store, 3)
    assert lru_store.lru_working_set(2).tolist() == [3, 2]
    with pytest.raises(EvictionPreconditionError):
        lru_store.evict(3)
    lru_store.evict(1)
    lru_store.lru_touch([2], 5.0)
    assert lru_store.lru_working_set(2).tolist() == [2, 3]
    assert lru_store.get(2).t_last_access == 5.0


def test_live_ids_from_wraps_once(store):
    fill(store, 5)
    store.update_item_atomic(2, tier=Tier.COLD)
    store.evict(2, 0.0)
    ids, cursor = store.live_ids_from(4, 3)
    assert ids.tolist() == [4, 5, 1]
    assert cursor == 2
    ids, cursor = store.live_ids_from(cursor, 10)
    assert ids.tolist() == [3, 4, 5, 1]


def test_last_used_falls_back_to_creation(store):
    store.put("a", unit(8, 1), 0.1, 3.0)
    store.put("b", unit(8, 2), 0.1, 4.0)
    store.update_item_atomic(2, t_last_access=9.0)
    assert store.last_used(np.array([1, 2])).tolist() == [3.0, 9.0]


def test_snapshot_round_trip_empty(store, config, tmp_path):
    path = str(tmp_path / "empty.bin")
    store.snapshot(path)
    restored = MemoryStore.restore(path, config)
    assert restored.count_live() == 0
    assert restored.put("after restore", unit(8, 1), 0.1, 0.0) == 1


def test_snapshot_round_trip_many(config, tmp_path):
    store = MemoryStore(config, policy=PolicyName.LRU, lru_capacity=50)
    fill(store, 10_000)
    rng = np.random.default_rng(4)
    for item_id in rng.choice(np.arange(1, 10_001), size=4000, replace=False):
        store.update_item_atomic(int(item_id), value=float(rng.uniform(0, 20)), tier=Tier.WARM, t_last=7.0)
    store.lru_touch([5, 17, 200], 8.0)
    for item_id in range(1, 2001):
        store.try_evict(item_id)
    path = str(tmp_path / "many.bin")
    store.snapshot(path)

    restored = MemoryStore.restore(path, config)
    assert restored.counts() == store.counts()
    assert restored.policy is PolicyName.LRU
    assert restored.lru_working_set(50).tolist() == store.lru_working_set(50).tolist()
    for tier in Tier:
        assert restored.tier_ids(tier).tolist() == store.tier_ids(tier).tolist()
    for item_id in range(1, 10_001):
        if store.is_live(item_id):
            a, b = store.get(item_id), restored.get(item_id)
            assert (a.value, a.tier, a.t_last, a.t_last_access, a.content) == (
                b.value, b.tier, b.t_last, b.t_last_access, b.content,
            )
            assert np.array_equal(a.embedding, b.embedding)
        else:
            assert not restored.is_live(item_id)
    assert restored.check_partition()
    query = unit(8, 123)
    allowlist = np.arange(1, 10_001)
    assert restored.vectors.scan(query, allowlist, 10) == store.vectors.scan(query, allowlist, 10)


@pytest.mark.slow
def test_snapshot_after_many_index_ops(config, tmp_path):
    store = MemoryStore(config)
    rng = np.random.default_rng(11)
    live = []
    for op in range(50_000):
        if live and rng.random() < 0.3:
            item_id = live.pop(int(rng.integers(len(live))))
            store.update_item_atomic(item_id, tier=Tier.COLD)
            store.evict(item_id, 0.0)
        else:
            live.append(store.put(f"op {op}", rng.standard_normal(8), 0.5, 0.0))
    path = str(tmp_path / "ops.bin")
    store.snapshot(path)

    restored = MemoryStore.restore(path, config)
    assert restored.count_live() == len(live)
    assert restored.vectors.indexed_ids().tolist() == sorted(live)
    allowlist = np.arange(1, store.next_id)
    for seed in range(20):
        query = unit(8, 1000 + seed)
        assert restored.vectors.scan(query, allowlist, 10) == store.vectors.scan(query, allowlist, 10)


def test_truncated_snapshot_is_corrupt(store, config, tmp_path):
    fill(store, 10)
    path = tmp_path / "snap.bin"
    store.snapshot(str(path))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptSnapshot):
        MemoryStore.restore(str(path), config)
    path.write_bytes(data[:10])
    with pytest.raises(CorruptSnapshot):
        MemoryStore.restore(str(path), config)


def test_flipped_byte_is_corrupt(store, config, tmp_path):
    fill(store, 3)
    path = tmp_path / "snap.bin"
    store.snapshot(str(path))
    data = bytearray(path.read_bytes())
    data[20] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptSnapshot):
        MemoryStore.restore(str(path), config)


def test_wal_recovery(config, tmp_path):
    data_dir = str(tmp_path / "data")
    store = MemoryStore(config, data_dir=data_dir)
    fill(store, 4)
    store.update_item_atomic(3, value=0.05, tier=Tier.COLD)
    store.evict(3, 1.0)
    store.write_usage(np.array([1, 2]), np.array([6.0, 7.0]), 2.0, accessed=True)
    store.close()

    recovered = MemoryStore.recover(data_dir, config)
    assert recovered.counts() == store.counts()
    assert recovered.get(2).value == 7.0
    assert recovered.get(2).t_last_access == 2.0
    assert not recovered.is_live(3)
    assert recovered.check_partition()
    recovered.close()


@pytest.mark.parametrize("wal_fsync", [False, True])
def test_wal_survives_a_store_that_was_never_closed(config, tmp_path, wal_fsync):
    data_dir = str(tmp_path / "data")
    store = MemoryStore(config, data_dir=data_dir, wal_fsync=wal_fsync)
    fill(store, 20)
    store.update_item_atomic(5, value=2.0, tier=Tier.WARM)

    recovered = MemoryStore.recover(data_dir, config)
    try:
        assert recovered.count_live() == 20
        assert recovered.get(5).tier is Tier.WARM
        assert recovered.get(20).content == "note 19"
    finally:
        recovered.close()
        store.close()


def test_wal_recovery_after_checkpoint(config, tmp_path):
    data_dir = str(tmp_path / "data")
    store = MemoryStore(config, data_dir=data_dir)
    fill(store, 3)
    assert store.checkpoint() is not None
    store.put("after checkpoint", unit(8, 77), 0.3, 5.0)
    store.update_item_atomic(1, value=1.5, tier=Tier.WARM)
    store.close()

    recovered = MemoryStore.recover(data_dir, config)
    assert recovered.count_live() == 4
    assert recovered.get(4).content == "after checkpoint"
    assert recovered.get(1).tier is Tier.WARM
    recovered.close()


def test_concurrent_updates_keep_partition(config):
    store = MemoryStore(config)
    fill(store, 200)
    tiers = list(Tier)

    def worker(seed):
        rng = np.random.default_rng(seed)
        for _ in range(500):
            item_id = int(rng.integers(1, 201))
            store.try_update(item_id, value=float(rng.uniform(0, 10)), tier=tiers[int(rng.integers(0, 3))])

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert store.check_partition()
    assert store.count_live() == 200


def test_dimension_mismatch_on_restore(store, tmp_path):
    fill(store, 1)
    path = str(tmp_path / "snap.bin")
    store.snapshot(path)
    with pytest.raises(DimensionMismatch):
        MemoryStore.restore(path, make_config(dim=16))
