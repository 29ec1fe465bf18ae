"""
Exact cosine-similarity flat scan restricted to a candidate allowlist.

Vectors live in one contiguous float64 array. ``_slot_by_id`` maps item ids to rows so an
allowlist is resolved with one vectorized gather, and removed rows are recycled.
"""

from __future__ import annotations

import logging
import threading
from typing import Iterable, List, Union

import numpy as np

from utils.datatypes import ScanResult
from utils.errors import DimensionMismatch, DuplicateId, NotFound

logger = logging.getLogger(__name__)


def similarities(block: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise dot products; each row is reduced identically regardless of its position"""
    if block.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    return np.einsum("ij,j->i", block, query)


def top_k(ids: np.ndarray, sims: np.ndarray, k_out: int) -> np.ndarray:
    """
    Positions of the top ``k_out`` entries ordered by (similarity desc, id asc).

    A partial partition finds the k-th largest similarity, every entry tied with it stays
    in the pool, and only that pool is fully ordered.
    """
    n = sims.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if n > k_out:
        kth = np.partition(sims, n - k_out)[n - k_out]
        pool = np.flatnonzero(sims >= kth)
    else:
        pool = np.arange(n)
    order = np.lexsort((ids[pool], -sims[pool]))
    return pool[order[:k_out]]


class VectorEngine:
    def __init__(self, dim: int, initial_capacity: int = 1024):
        self.dim = int(dim)
        capacity = max(1, int(initial_capacity))
        self._vectors = np.zeros((capacity, self.dim), dtype=np.float64)
        self._id_of_slot = np.full(capacity, -1, dtype=np.int64)
        self._slot_by_id = np.full(capacity, -1, dtype=np.int64)
        self._free_slots: List[int] = []
        self._next_slot = 0
        self._count = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._count

    def _check_dim(self, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1 or vector.shape[0] != self.dim:
            raise DimensionMismatch(self.dim, int(vector.shape[-1]) if vector.ndim else 0)
        return vector

    def _grow_slots(self) -> None:
        capacity = self._vectors.shape[0] * 2
        vectors = np.zeros((capacity, self.dim), dtype=np.float64)
        vectors[: self._vectors.shape[0]] = self._vectors
        id_of_slot = np.full(capacity, -1, dtype=np.int64)
        id_of_slot[: self._id_of_slot.shape[0]] = self._id_of_slot
        self._vectors = vectors
        self._id_of_slot = id_of_slot

    def _grow_ids(self, item_id: int) -> None:
        size = self._slot_by_id.shape[0]
        while size <= item_id:
            size *= 2
        slot_by_id = np.full(size, -1, dtype=np.int64)
        slot_by_id[: self._slot_by_id.shape[0]] = self._slot_by_id
        self._slot_by_id = slot_by_id

    def index_vector(self, item_id: int, embedding: np.ndarray, normalize: bool = True) -> None:
        """Make ``embedding`` visible to scans under ``item_id``; stored normalized"""
        vector = self._check_dim(embedding)
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise ValueError("cannot index a zero vector")
        if not normalize:
            norm = 1.0
        with self._lock:
            if item_id < 0:
                raise ValueError("item ids are non-negative")
            if item_id < self._slot_by_id.shape[0] and self._slot_by_id[item_id] >= 0:
                raise DuplicateId(item_id)
            if item_id >= self._slot_by_id.shape[0]:
                self._grow_ids(item_id)
            if self._free_slots:
                slot = self._free_slots.pop()
            else:
                if self._next_slot >= self._vectors.shape[0]:
                    self._grow_slots()
                slot = self._next_slot
                self._next_slot += 1
            self._vectors[slot] = vector / norm
            self._id_of_slot[slot] = item_id
            self._slot_by_id[item_id] = slot
            self._count += 1

    def remove_vector(self, item_id: int) -> None:
        with self._lock:
            slot = self._slot(item_id)
            if slot < 0:
                raise NotFound(item_id)
            self._slot_by_id[item_id] = -1
            self._id_of_slot[slot] = -1
            self._vectors[slot] = 0.0
            self._free_slots.append(slot)
            self._count -= 1

    def _slot(self, item_id: int) -> int:
        if item_id < 0 or item_id >= self._slot_by_id.shape[0]:
            return -1
        return int(self._slot_by_id[item_id])

    def contains(self, item_id: int) -> bool:
        with self._lock:
            return self._slot(item_id) >= 0

    def vector(self, item_id: int) -> np.ndarray:
        with self._lock:
            slot = self._slot(item_id)
            if slot < 0:
                raise NotFound(item_id)
            return self._vectors[slot].copy()

    def indexed_ids(self) -> np.ndarray:
        with self._lock:
            ids = self._id_of_slot[: self._next_slot]
            return np.sort(ids[ids >= 0])

    def scan(
        self,
        query: np.ndarray,
        allowlist: Union[np.ndarray, Iterable[int]],
        k_out: int,
    ) -> ScanResult:
        """
        Exact top-``k_out`` cosine search over the allowlisted, indexed vectors.

        Args:
            query: unit-norm query vector of dimension D
            allowlist: candidate item ids (a set; duplicates are not expected)
            k_out: number of hits to return, >= 1

        Returns:
            ScanResult with hits ordered by (similarity desc, id asc)
        """
        query = self._check_dim(query)
        if k_out < 1:
            raise ValueError("k_out must be >= 1")
        ids = np.asarray(
            allowlist if isinstance(allowlist, np.ndarray) else list(allowlist),
            dtype=np.int64,
        )
        if ids.size == 0:
            return ScanResult(hits=[], vectors_scanned=0)

        # drop ids that were never indexed or are already removed
        with self._lock:
            in_range = (ids >= 0) & (ids < self._slot_by_id.shape[0])
            ids = ids[in_range]
            slots = self._slot_by_id[ids]
            indexed = slots >= 0
            ids = ids[indexed]
            block = self._vectors[slots[indexed]]

        # scoring happens on the copied block, outside the lock
        sims = similarities(block, query)
        picked = top_k(ids, sims, k_out)
        hits = list(zip(ids[picked].tolist(), sims[picked].tolist()))
        return ScanResult(hits=hits, vectors_scanned=int(ids.shape[0]))

