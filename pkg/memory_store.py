"""
Memory store: item metadata, tier indexes, per-item atomic updates and persistence.

Item state is columnar (numpy arrays indexed by item id) and embeddings live in the
shared VectorEngine. Tier membership is plain metadata: moving an item between tiers
never touches the vector index; only put and evict do.

Persistence is an append-only NDJSON write-ahead log plus binary snapshots. The store
is in-memory when no data directory is given.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
from collections import OrderedDict, deque
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import asdict, dataclass
from itertools import islice
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from lifecycle import initial_tier
from utils.datatypes import MemoryItem, PolicyName, Tier, TIER_ORDER, ValidatedConfig
from utils.errors import (
    CorruptSnapshot,
    DimensionMismatch,
    Evicted,
    EvictionPreconditionError,
    NotFound,
    StorageFull,
)
from vector_engine import VectorEngine

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"AMVL"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIQQ")  # magic, version, dim, record count, next id
_RECORD = struct.Struct("<QdddddB?")  # id, value, t_last, t_created, t_last_access, label, tier, evicted
_LEN = struct.Struct("<I")
_COUNT = struct.Struct("<Q")
_FLOAT = struct.Struct("<d")
_DIGEST_SIZE = 32

_IN_REQUEST: ContextVar[bool] = ContextVar("amvl_in_request", default=False)


@dataclass
class RequestPathCounters:
    """Lifecycle work observed while a request handler was running"""

    migrations: int = 0
    evictions: int = 0
    sweeps: int = 0
    expirations: int = 0
    maintenance_waits: int = 0
    "Requests that found the gate held by a sweep; they wait, they do no lifecycle work."


class MemoryStore:
    def __init__(
        self,
        config: ValidatedConfig,
        *,
        policy: PolicyName = PolicyName.AMVL,
        ttl_window: Optional[float] = None,
        lru_capacity: int = 512,
        max_items: Optional[int] = None,
        data_dir: Optional[str] = None,
        wal_fsync: bool = False,
        initial_capacity: int = 1024,
    ):
        self.config = config
        self.dim = config.retrieval.embedding_dim
        self.policy = PolicyName(policy)
        self.ttl_window = ttl_window
        self.lru_capacity = lru_capacity
        self.max_items = max_items
        self.vectors = VectorEngine(self.dim, initial_capacity)

        capacity = max(2, int(initial_capacity))
        self._value = np.zeros(capacity, dtype=np.float64)
        self._t_last = np.zeros(capacity, dtype=np.float64)
        self._t_created = np.zeros(capacity, dtype=np.float64)
        self._t_last_access = np.full(capacity, np.nan, dtype=np.float64)
        self._label = np.zeros(capacity, dtype=np.float64)
        self._tier = np.zeros(capacity, dtype=np.int8)
        # row 0 is never used; ids start at 1
        self._evicted = np.ones(capacity, dtype=bool)
        self._content: List[str] = [""]
        self._namespace: List[str] = [""]

        self._tiers: Dict[Tier, Dict[int, None]] = {tier: {} for tier in TIER_ORDER}
        self.ttl_queue: Optional[deque] = deque() if self.policy is PolicyName.TTL else None
        self.lru_list: Optional[OrderedDict] = (
            OrderedDict() if self.policy is PolicyName.LRU else None
        )

        self.next_id = 1
        self.sweep_cursor = 1
        self.evicted_total = 0
        self.sweeps_total = 0
        self.request_path = RequestPathCounters()
        self._lock = threading.RLock()

        self.data_dir = data_dir
        self.wal_fsync = wal_fsync
        self._wal = None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            self._wal = open(os.path.join(data_dir, "wal.ndjson"), "a", encoding="utf-8")

    # statements and instrumentation

    @contextmanager
    def statement(self) -> Iterator[None]:
        """Everything inside is applied as one indivisible mutation"""
        with self._lock:
            yield

    @contextmanager
    def request_scope(self) -> Iterator[None]:
        token = _IN_REQUEST.set(True)
        try:
            yield
        finally:
            _IN_REQUEST.reset(token)

    @staticmethod
    def in_request() -> bool:
        return _IN_REQUEST.get()

    def note_sweep(self) -> None:
        with self._lock:
            self.sweeps_total += 1
            if _IN_REQUEST.get():
                self.request_path.sweeps += 1

    def note_maintenance_wait(self) -> None:
        with self._lock:
            self.request_path.maintenance_waits += 1

    def _log(self, record: Dict[str, object]) -> None:
        if self._wal is None:
            return
        self._wal.write(json.dumps(record) + "\n")
        # every record reaches the OS before the mutation returns
        self._wal.flush()
        if self.wal_fsync:
            os.fsync(self._wal.fileno())

    # columns

    def _grow(self, needed: int) -> None:
        capacity = self._value.shape[0]
        if needed < capacity:
            return
        while capacity <= needed:
            capacity *= 2

        def grown(column: np.ndarray, fill: object) -> np.ndarray:
            out = np.full(capacity, fill, dtype=column.dtype)
            out[: column.shape[0]] = column
            return out

        self._value = grown(self._value, 0.0)
        self._t_last = grown(self._t_last, 0.0)
        self._t_created = grown(self._t_created, 0.0)
        self._t_last_access = grown(self._t_last_access, np.nan)
        self._label = grown(self._label, 0.0)
        self._tier = grown(self._tier, 0)
        self._evicted = grown(self._evicted, True)

    def _require_live(self, item_id: int) -> None:
        if item_id < 1 or item_id >= self.next_id:
            raise NotFound(item_id)
        if self._evicted[item_id]:
            raise Evicted(item_id)

    def live_mask(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        with self._lock:
            in_range = (ids >= 1) & (ids < self.next_id)
            mask = np.zeros(ids.shape[0], dtype=bool)
            mask[in_range] = ~self._evicted[ids[in_range]]
            return mask

    def is_live(self, item_id: int) -> bool:
        with self._lock:
            return 1 <= item_id < self.next_id and not self._evicted[item_id]

    # write path

    def put(
        self,
        content: str,
        embedding: np.ndarray,
        label_value: float,
        t: float,
        namespace: str = "default",
    ) -> int:
        """
        Store a new item at value v_init and return its id.

        Raises:
            DimensionMismatch: embedding is not D-dimensional
            StorageFull: the configured maximum item count is reached
        """
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.ndim != 1 or embedding.shape[0] != self.dim:
            raise DimensionMismatch(self.dim, int(embedding.shape[-1]) if embedding.ndim else 0)
        v_init = self.config.v_init
        tier = initial_tier(v_init, self.config.thresholds)
        with self._lock:
            if self.max_items is not None and self.count_live() >= self.max_items:
                raise StorageFull(self.max_items)
            item_id = self.next_id
            self.vectors.index_vector(item_id, embedding)
            self._insert(item_id, namespace, content, label_value, t, v_init, tier)
            self._log(
                {
                    "op": "put",
                    "id": item_id,
                    "namespace": namespace,
                    "content": content,
                    "label_value": label_value,
                    "t": t,
                    "embedding": self.vectors.vector(item_id).tolist(),
                }
            )
        return item_id

    def _insert(
        self,
        item_id: int,
        namespace: str,
        content: str,
        label_value: float,
        t: float,
        value: float,
        tier: Tier,
    ) -> None:
        self._grow(item_id)
        self._value[item_id] = value
        self._t_last[item_id] = t
        self._t_created[item_id] = t
        self._t_last_access[item_id] = np.nan
        self._label[item_id] = label_value
        self._tier[item_id] = tier.code
        self._evicted[item_id] = False
        self._content.append(content)
        self._namespace.append(namespace)
        self._tiers[tier][item_id] = None
        if self.ttl_queue is not None:
            self.ttl_queue.append(item_id)
        if self.lru_list is not None:
            self.lru_list[item_id] = None
        self.next_id = item_id + 1

    def update_item_atomic(
        self,
        item_id: int,
        *,
        value: Optional[float] = None,
        tier: Optional[Tier] = None,
        t_last: Optional[float] = None,
        t_last_access: Optional[float] = None,
    ) -> MemoryItem:
        """
        Apply every given field and the matching tier-index move as one statement.

        Raises:
            NotFound, Evicted
        """
        with self._lock:
            self._require_live(item_id)
            if value is not None and not 0.0 <= value <= self.config.params.v_max:
                raise ValueError(f"value {value} outside [0, v_max]")
            self._apply(item_id, value, tier, t_last, t_last_access)
            fields = {
                "value": value,
                "tier": tier.value if tier is not None else None,
                "t_last": t_last,
                "t_last_access": t_last_access,
            }
            self._log({"op": "update", "id": item_id, **{k: v for k, v in fields.items() if v is not None}})
            return self._item(item_id)

    def _apply(
        self,
        item_id: int,
        value: Optional[float],
        tier: Optional[Tier],
        t_last: Optional[float],
        t_last_access: Optional[float],
    ) -> None:
        if value is not None:
            self._value[item_id] = value
        if t_last is not None:
            self._t_last[item_id] = t_last
        if t_last_access is not None:
            self._t_last_access[item_id] = t_last_access
        if tier is not None:
            current = Tier.from_code(self._tier[item_id])
            if tier is not current:
                del self._tiers[current][item_id]
                self._tiers[tier][item_id] = None
                self._tier[item_id] = tier.code
                if _IN_REQUEST.get():
                    self.request_path.migrations += 1

    def try_update(self, item_id: int, **delta: object) -> bool:
        try:
            self.update_item_atomic(item_id, **delta)
            return True
        except (NotFound, Evicted):
            return False

    def evict(self, item_id: int, t_now: Optional[float] = None) -> None:
        """
        Tombstone an item and drop it from every index.

        The precondition depends on the active policy: AMV-L evicts only Cold items,
        TTL only expired items, LRU only items outside the working set.
        """
        with self._lock:
            self._require_live(item_id)
            self._check_evictable(item_id, t_now)
            self._tombstone(item_id)
            self._log({"op": "evict", "id": item_id, "t": t_now})
            if _IN_REQUEST.get():
                if self.policy is PolicyName.TTL:
                    self.request_path.expirations += 1
                else:
                    self.request_path.evictions += 1

    def try_evict(self, item_id: int, t_now: Optional[float] = None) -> bool:
        try:
            self.evict(item_id, t_now)
            return True
        except (NotFound, Evicted, EvictionPreconditionError):
            return False

    def _check_evictable(self, item_id: int, t_now: Optional[float]) -> None:
        if self.policy is PolicyName.AMVL:
            if self._tier[item_id] != Tier.COLD.code:
                raise EvictionPreconditionError(item_id, "only cold items are evicted")
        elif self.policy is PolicyName.TTL:
            if self.ttl_window is None or t_now is None:
                raise EvictionPreconditionError(item_id, "no retention window to expire against")
            if t_now - self._t_created[item_id] < self.ttl_window:
                raise EvictionPreconditionError(item_id, "item has not expired")
        else:
            working_set = islice(reversed(self.lru_list), self.lru_capacity)
            if item_id in set(working_set):
                raise EvictionPreconditionError(item_id, "item is in the LRU working set")

    def _tombstone(self, item_id: int) -> None:
        tier = Tier.from_code(self._tier[item_id])
        del self._tiers[tier][item_id]
        self._evicted[item_id] = True
        if self.ttl_queue is not None:
            if self.ttl_queue and self.ttl_queue[0] == item_id:
                self.ttl_queue.popleft()
            else:
                self.ttl_queue.remove(item_id)
        if self.lru_list is not None:
            self.lru_list.pop(item_id, None)
        self.vectors.remove_vector(item_id)
        self.evicted_total += 1

    # reads

    def _item(self, item_id: int) -> MemoryItem:
        t_access = float(self._t_last_access[item_id])
        evicted = bool(self._evicted[item_id])
        return MemoryItem(
            id=item_id,
            namespace=self._namespace[item_id],
            content=self._content[item_id],
            embedding=(
                np.zeros(self.dim) if evicted else self.vectors.vector(item_id)
            ),
            value=float(self._value[item_id]),
            t_last=float(self._t_last[item_id]),
            t_created=float(self._t_created[item_id]),
            t_last_access=None if math.isnan(t_access) else t_access,
            tier=Tier.from_code(self._tier[item_id]),
            label_value=float(self._label[item_id]),
            evicted=evicted,
        )

    def get(self, item_id: int) -> MemoryItem:
        with self._lock:
            self._require_live(item_id)
            return self._item(item_id)

    def item_state(self, item_id: int) -> Tuple[float, float, Tier]:
        with self._lock:
            self._require_live(item_id)
            return (
                float(self._value[item_id]),
                float(self._t_last[item_id]),
                Tier.from_code(self._tier[item_id]),
            )

    def usage_state(self, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        with self._lock:
            return self._value[ids].copy(), self._t_last[ids].copy(), self._tier[ids].copy()

    def write_usage(
        self, ids: np.ndarray, values: np.ndarray, t_now: float, *, accessed: bool
    ) -> None:
        """Batch value write; each item's value and timestamps change together"""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        with self._lock:
            self._value[ids] = values
            self._t_last[ids] = t_now
            if accessed:
                self._t_last_access[ids] = t_now
            self._log(
                {
                    "op": "usage",
                    "ids": ids.tolist(),
                    "values": np.asarray(values, dtype=np.float64).tolist(),
                    "t": t_now,
                    "accessed": accessed,
                }
            )

    def tier_ids(self, tier: Tier) -> np.ndarray:
        with self._lock:
            members = self._tiers[tier]
            return np.fromiter(members, dtype=np.int64, count=len(members))

    def tier_size(self, tier: Tier) -> int:
        return len(self._tiers[tier])

    def count_live(self) -> int:
        return sum(len(members) for members in self._tiers.values())

    def counts(self) -> Dict[str, int]:
        with self._lock:
            hot, warm, cold = (len(self._tiers[t]) for t in TIER_ORDER)
            return {
                "hot": hot,
                "warm": warm,
                "cold": cold,
                "stored": hot + warm + cold,
                "evicted": self.evicted_total,
                "total": self.next_id - 1,
            }

    def last_used(self, ids: np.ndarray) -> np.ndarray:
        """Last access time, falling back to creation time for never-accessed items"""
        with self._lock:
            access = self._t_last_access[ids]
            return np.where(np.isnan(access), self._t_created[ids], access)

    def labels(self, ids: Sequence[int]) -> List[float]:
        """Ground-truth labels for evaluation telemetry; never handed to policies"""
        with self._lock:
            return self._label[np.asarray(ids, dtype=np.int64)].tolist()

    def contents(self, ids: Sequence[int]) -> List[str]:
        with self._lock:
            return [self._content[int(i)] for i in ids]

    def live_ids_from(self, cursor: int, limit: int) -> Tuple[np.ndarray, int]:
        """Up to ``limit`` live ids at or after ``cursor``, wrapping around once"""
        with self._lock:
            if self.next_id <= 1 or limit <= 0:
                return np.empty(0, dtype=np.int64), 1
            cursor = cursor if 1 <= cursor < self.next_id else 1
            tail = np.flatnonzero(~self._evicted[cursor : self.next_id]) + cursor
            picked = tail[:limit]
            if picked.shape[0] < limit and cursor > 1:
                head = np.flatnonzero(~self._evicted[1:cursor]) + 1
                picked = np.concatenate([picked, head[: limit - picked.shape[0]]])
            if picked.shape[0] == 0:
                return picked.astype(np.int64), 1
            next_cursor = int(picked[-1]) + 1
            if next_cursor >= self.next_id:
                next_cursor = 1
            return picked.astype(np.int64), next_cursor

    # TTL structures

    def ttl_ids(self) -> np.ndarray:
        with self._lock:
            return np.fromiter(self.ttl_queue, dtype=np.int64, count=len(self.ttl_queue))

    def expire(self, t_now: float) -> List[int]:
        """Evict expired items from the head of the TTL queue"""
        expired = []
        with self._lock:
            while self.ttl_queue and t_now - self._t_created[self.ttl_queue[0]] >= self.ttl_window:
                item_id = self.ttl_queue[0]
                self.evict(item_id, t_now)
                expired.append(item_id)
        return expired

    # LRU structures

    def lru_working_set(self, capacity: int) -> np.ndarray:
        """The ``capacity`` most recently used ids, most recent first"""
        with self._lock:
            size = min(capacity, len(self.lru_list))
            return np.fromiter(islice(reversed(self.lru_list), size), dtype=np.int64, count=size)

    def lru_touch(self, ids_in_order: Sequence[int], t_now: float) -> None:
        """Move ids to the MRU end in the given order; the last id becomes most recent"""
        with self._lock:
            touched = []
            for item_id in ids_in_order:
                item_id = int(item_id)
                if item_id in self.lru_list:
                    self.lru_list.move_to_end(item_id)
                    self._t_last_access[item_id] = t_now
                    touched.append(item_id)
            self._log({"op": "touch", "ids": touched, "t": t_now})

    # consistency

    def check_partition(self) -> bool:
        """Debug sweep: tier sets partition exactly the non-evicted ids"""
        with self._lock:
            live = set(np.flatnonzero(~self._evicted[1 : self.next_id]) + 1)
            seen: set = set()
            for tier in TIER_ORDER:
                members = set(self._tiers[tier])
                if members & seen:
                    return False
                if any(self._tier[i] != tier.code for i in members):
                    return False
                seen |= members
            return seen == {int(i) for i in live} and len(self.vectors) == len(live)

    def view(self) -> "PolicyView":
        return PolicyView(self)

    # persistence

    def snapshot(self, path: str) -> None:
        """Write a checksummed binary snapshot of items and indexes"""
        with self._lock:
            payload = self._encode()
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "wb") as f:
            f.write(payload)
            f.write(hashlib.sha256(payload).digest())
        os.replace(tmp_path, path)
        logger.info(f"Saved snapshot with {self.next_id - 1} items to {path}")

    def _encode(self) -> bytes:
        chunks = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.dim, self.next_id - 1, self.next_id)]
        for item_id in range(1, self.next_id):
            evicted = bool(self._evicted[item_id])
            body = [
                _RECORD.pack(
                    item_id,
                    self._value[item_id],
                    self._t_last[item_id],
                    self._t_created[item_id],
                    self._t_last_access[item_id],
                    self._label[item_id],
                    int(self._tier[item_id]),
                    evicted,
                ),
                _pack_text(self._namespace[item_id]),
                _pack_text(self._content[item_id]),
            ]
            if not evicted:
                body.append(self.vectors.vector(item_id).astype("<f8").tobytes())
            record = b"".join(body)
            chunks.append(_LEN.pack(len(record)))
            chunks.append(record)

        orders = [list(self._tiers[t]) for t in TIER_ORDER]
        orders.append(list(self.ttl_queue) if self.ttl_queue is not None else [])
        orders.append(list(self.lru_list) if self.lru_list is not None else [])
        for order in orders:
            chunks.append(_COUNT.pack(len(order)))
            chunks.append(np.asarray(order, dtype="<i8").tobytes())
        chunks.append(_COUNT.pack(self.sweep_cursor))
        chunks.append(_COUNT.pack(self.evicted_total))
        chunks.append(_pack_text(self.policy.value))
        chunks.append(_FLOAT.pack(self.ttl_window if self.ttl_window is not None else math.nan))
        chunks.append(_COUNT.pack(self.lru_capacity))
        return b"".join(chunks)

    @classmethod
    def restore(
        cls,
        path: str,
        config: ValidatedConfig,
        *,
        max_items: Optional[int] = None,
        data_dir: Optional[str] = None,
    ) -> "MemoryStore":
        """
        Load a snapshot written by ``snapshot``.

        Raises:
            CorruptSnapshot: bad magic, checksum mismatch or truncated content
            OSError: the file cannot be read
        """
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < _HEADER.size + _DIGEST_SIZE:
            raise CorruptSnapshot(f"{path}: file too short")
        payload, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
        if hashlib.sha256(payload).digest() != digest:
            raise CorruptSnapshot(f"{path}: checksum mismatch")
        try:
            store = cls._decode(payload, config, max_items=max_items, data_dir=data_dir)
        except (struct.error, UnicodeDecodeError, ValueError, KeyError) as e:
            raise CorruptSnapshot(f"{path}: {e}") from None
        logger.info(f"Restored snapshot with {store.next_id - 1} items from {path}")
        return store

    @classmethod
    def _decode(
        cls,
        payload: bytes,
        config: ValidatedConfig,
        *,
        max_items: Optional[int],
        data_dir: Optional[str],
    ) -> "MemoryStore":
        reader = _Reader(payload)
        magic, version, dim, count, next_id = reader.unpack(_HEADER)
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise ValueError("unknown snapshot format")
        if dim != config.retrieval.embedding_dim:
            raise DimensionMismatch(config.retrieval.embedding_dim, dim)

        # item records
        records = []
        for _ in range(count):
            (length,) = reader.unpack(_LEN)
            record = _Reader(reader.take(length))
            fields = record.unpack(_RECORD)
            namespace = record.text()
            content = record.text()
            embedding = None
            if not fields[7]:
                embedding = np.frombuffer(record.take(dim * 8), dtype="<f8").astype(np.float64)
            records.append((fields, namespace, content, embedding))
        # tier, TTL and LRU orders
        orders = []
        for _ in range(5):
            (size,) = reader.unpack(_COUNT)
            orders.append(np.frombuffer(reader.take(size * 8), dtype="<i8").tolist())
        (cursor,) = reader.unpack(_COUNT)
        (evicted_total,) = reader.unpack(_COUNT)
        policy = PolicyName(reader.text())
        (ttl_window,) = reader.unpack(_FLOAT)
        (lru_capacity,) = reader.unpack(_COUNT)
        if not reader.done():
            raise ValueError("trailing bytes after snapshot content")

        store = cls(
            config,
            policy=policy,
            ttl_window=None if math.isnan(ttl_window) else ttl_window,
            lru_capacity=lru_capacity,
            max_items=max_items,
            data_dir=data_dir,
            initial_capacity=max(1024, next_id),
        )
        # columns first, then indexes in their saved order
        for fields, namespace, content, embedding in records:
            item_id, value, t_last, t_created, t_access, label, tier_code, evicted = fields
            store._value[item_id] = value
            store._t_last[item_id] = t_last
            store._t_created[item_id] = t_created
            store._t_last_access[item_id] = t_access
            store._label[item_id] = label
            store._tier[item_id] = tier_code
            store._evicted[item_id] = evicted
            store._content.append(content)
            store._namespace.append(namespace)
            if embedding is not None:
                store.vectors.index_vector(item_id, embedding, normalize=False)
        for tier, order in zip(TIER_ORDER, orders[:3]):
            store._tiers[tier] = dict.fromkeys(order)
        if store.ttl_queue is not None:
            store.ttl_queue.extend(orders[3])
        if store.lru_list is not None:
            store.lru_list.update((i, None) for i in orders[4])
        store.next_id = next_id
        store.sweep_cursor = cursor
        store.evicted_total = evicted_total
        return store

    def checkpoint(self) -> Optional[str]:
        """Snapshot into the data directory and truncate the WAL"""
        if not self.data_dir:
            return None
        path = os.path.join(self.data_dir, "snapshot.bin")
        with self._lock:
            self.snapshot(path)
            if self._wal is not None:
                self._wal.close()
            self._wal = open(os.path.join(self.data_dir, "wal.ndjson"), "w", encoding="utf-8")
        return path

    @classmethod
    def recover(
        cls,
        data_dir: str,
        config: ValidatedConfig,
        *,
        policy: PolicyName = PolicyName.AMVL,
        ttl_window: Optional[float] = None,
        lru_capacity: int = 512,
        max_items: Optional[int] = None,
        wal_fsync: bool = False,
    ) -> "MemoryStore":
        """Rebuild a store from the latest snapshot plus the WAL written after it"""
        # Start from the last checkpoint, if any
        snapshot_path = os.path.join(data_dir, "snapshot.bin")
        if os.path.exists(snapshot_path):
            store = cls.restore(snapshot_path, config, max_items=max_items)
        else:
            store = cls(
                config,
                policy=policy,
                ttl_window=ttl_window,
                lru_capacity=lru_capacity,
                max_items=max_items,
            )
        # Replay what was logged after it
        wal_path = os.path.join(data_dir, "wal.ndjson")
        replayed = 0
        if os.path.exists(wal_path):
            with open(wal_path, "r", encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        store._replay(json.loads(line))
                    except json.JSONDecodeError:
                        # a torn final write from a crash
                        logger.warning(f"Ignoring unreadable WAL line {line_no} in {wal_path}")
                        break
                    replayed += 1
        store.data_dir = data_dir
        store.wal_fsync = wal_fsync
        # keep appending to the same log
        store._wal = open(wal_path, "a", encoding="utf-8")
        logger.info(f"Recovered store from {data_dir}: replayed {replayed} WAL records")
        return store

    def _replay(self, record: Dict[str, object]) -> None:
        op = record["op"]
        if op == "put":
            item_id = int(record["id"])
            self.vectors.index_vector(item_id, np.asarray(record["embedding"]), normalize=False)
            v_init = self.config.v_init
            self._insert(
                item_id,
                str(record["namespace"]),
                str(record["content"]),
                float(record["label_value"]),
                float(record["t"]),
                v_init,
                initial_tier(v_init, self.config.thresholds),
            )
        elif op == "update":
            tier = record.get("tier")
            self._apply(
                int(record["id"]),
                record.get("value"),
                Tier(tier) if tier is not None else None,
                record.get("t_last"),
                record.get("t_last_access"),
            )
        elif op == "usage":
            ids = np.asarray(record["ids"], dtype=np.int64)
            self._value[ids] = np.asarray(record["values"], dtype=np.float64)
            self._t_last[ids] = record["t"]
            if record["accessed"]:
                self._t_last_access[ids] = record["t"]
        elif op == "evict":
            self._tombstone(int(record["id"]))
        elif op == "touch":
            for item_id in record["ids"]:
                self.lru_list.move_to_end(int(item_id))
                self._t_last_access[int(item_id)] = record["t"]
        else:
            raise ValueError(f"unknown WAL op {op!r}")

    def close(self) -> None:
        with self._lock:
            if self._wal is not None:
                self._wal.close()
                self._wal = None

    def stats(self) -> Dict[str, object]:
        counts = self.counts()
        counts["sweeps"] = self.sweeps_total
        counts["request_path"] = asdict(self.request_path)
        return counts


class PolicyView:
    """
    The part of the store an eligibility policy may see.

    Exposes tier membership, recency and usage state. Labels and contents are not
    reachable through this interface.
    """

    def __init__(self, store: MemoryStore):
        self._store = store

    @property
    def lru_capacity(self) -> int:
        return self._store.lru_capacity

    def statement(self):
        return self._store.statement()

    def tier_ids(self, tier: Tier) -> np.ndarray:
        return self._store.tier_ids(tier)

    def tier_size(self, tier: Tier) -> int:
        return self._store.tier_size(tier)

    def last_used(self, ids: np.ndarray) -> np.ndarray:
        return self._store.last_used(ids)

    def live_mask(self, ids: np.ndarray) -> np.ndarray:
        return self._store.live_mask(ids)

    def usage_state(self, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._store.usage_state(ids)

    def write_usage(self, ids: np.ndarray, values: np.ndarray, t_now: float, *, accessed: bool) -> None:
        self._store.write_usage(ids, values, t_now, accessed=accessed)

    def ttl_ids(self) -> np.ndarray:
        return self._store.ttl_ids()

    def expire(self, t_now: float) -> List[int]:
        return self._store.expire(t_now)

    def lru_working_set(self, capacity: int) -> np.ndarray:
        return self._store.lru_working_set(capacity)

    def lru_touch(self, ids_in_order: Sequence[int], t_now: float) -> None:
        self._store.lru_touch(ids_in_order, t_now)


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _LEN.pack(len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, size: int) -> bytes:
        end = self._pos + size
        if end > len(self._data):
            raise ValueError("truncated record")
        chunk = self._data[self._pos : end]
        self._pos = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple:
        return fmt.unpack(self.take(fmt.size))

    def text(self) -> str:
        (size,) = self.unpack(_LEN)
        return self.take(size).decode("utf-8")

    def done(self) -> bool:
        return self._pos == len(self._data)
