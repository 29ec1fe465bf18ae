"""
Per-request retrieval pipeline.

    embed -> [ordered: clock, candidates R, allowlist scan, feedback] -> assemble -> answer

The ordered section is supplied by the caller. Under the benchmark it is a ticket gate
that serializes state-touching work in trace order; in service mode it just reads the
clock. Everything else runs concurrently.
"""

from __future__ import annotations

import hashlib
import logging
import re
import threading
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, ContextManager, Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from memory_store import MemoryStore
from policies import EligibilityPolicy
from prompts import (
    ANSWER_TEMPLATE,
    CITATION_TEMPLATE,
    CONVERSATION_HEADER,
    CONVERSATION_TURN_TEMPLATE,
    MEMORY_HEADER,
    MEMORY_ITEM_TEMPLATE,
    NO_MEMORY_ANSWER_TEMPLATE,
    QUERY_TEMPLATE,
    SYSTEM_PROMPT,
)
from utils.clock import Clock
from utils.datatypes import (
    AskRequest,
    CandidateSet,
    ClockMode,
    PromptContext,
    RequestKind,
    ScanResult,
    ValidatedConfig,
)
from utils.errors import CapExceeded, EmptyContent

logger = logging.getLogger(__name__)

TOPIC_TAG = re.compile(r"\[topic:(\d+)\]")
DEFAULT_EMBED_NOISE = 0.5

@dataclass(frozen=True)
class OrderedSlot:
    """What the ordered section hands the request: its timestamp and any maintenance hold-up"""

    t_now: float
    maintenance_wait_us: float = 0.0


OrderedSection = Callable[[AskRequest], ContextManager[OrderedSlot]]


# Embedding


def _text_key(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def topic_vector(topic: int, dim: int, embed_seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(embed_seed), int(topic)])
    base = rng.standard_normal(dim)
    return base / np.linalg.norm(base)


def embed_query(
    text: str, dim: int, embed_seed: int, noise: float = DEFAULT_EMBED_NOISE
) -> np.ndarray:
    """
    Deterministic unit vector for ``text``.

    Text carrying a ``[topic:N]`` tag lands near that topic's base vector; the offset is
    seeded by a stable hash of the full text. Untagged text maps to a seeded random
    direction.
    """
    rng = np.random.default_rng([int(embed_seed), _text_key(text)])
    jitter = rng.standard_normal(dim)
    match = TOPIC_TAG.search(text)
    if match is None:
        vector = jitter
    else:
        vector = topic_vector(int(match.group(1)), dim, embed_seed) + jitter * (noise / np.sqrt(dim))
    return vector / np.linalg.norm(vector)


# Prompt assembly


def count_tokens(text: str) -> int:
    """Whitespace tokenizer: one token per maximal non-whitespace run"""
    return len(text.split())


class ConversationBuffer:
    """Last ``turns`` ask texts per namespace"""

    def __init__(self, turns: int):
        self.turns = turns
        self._buffers: Dict[str, Deque[str]] = defaultdict(lambda: deque(maxlen=self.turns))
        self._lock = threading.Lock()

    def recent(self, namespace: str) -> List[str]:
        with self._lock:
            return list(self._buffers[namespace]) if self.turns else []

    def push(self, namespace: str, text: str) -> None:
        if self.turns == 0:
            return
        with self._lock:
            self._buffers[namespace].append(text)


def render_prompt(context: PromptContext) -> str:
    parts = [context.system_prompt.strip()]
    if context.recent_conversation:
        parts.append(CONVERSATION_HEADER)
        parts.extend(CONVERSATION_TURN_TEMPLATE.format(text=t) for t in context.recent_conversation)
    if context.injected:
        parts.append(MEMORY_HEADER)
        parts.extend(
            MEMORY_ITEM_TEMPLATE.format(item_id=item_id, content=content)
            for item_id, content in context.injected
        )
    parts.append(QUERY_TEMPLATE.format(query=context.query))
    return "\n".join(parts)


def assemble_prompt(
    query: str,
    conversation: List[str],
    injected: List[Tuple[int, str]],
    system_prompt: str = SYSTEM_PROMPT,
) -> PromptContext:
    """P = system prompt, recent conversation, injected items in similarity order, query"""
    draft = PromptContext(
        system_prompt=system_prompt,
        recent_conversation=conversation,
        injected=injected,
        query=query,
    )
    return draft.model_copy(update={"token_count": count_tokens(render_prompt(draft))})


def mock_answer(context: PromptContext) -> str:
    """Deterministic stand-in for an LLM call: a digest of the prompt plus citations"""
    digest = hashlib.blake2b(render_prompt(context).encode("utf-8"), digest_size=8).hexdigest()
    if not context.injected:
        return NO_MEMORY_ANSWER_TEMPLATE.format(digest=digest)
    citations = "".join(CITATION_TEMPLATE.format(item_id=item_id) for item_id, _ in context.injected)
    return ANSWER_TEMPLATE.format(digest=digest, count=len(context.injected), citations=citations)


# Request handling


class PhaseTimer:
    def __init__(self) -> None:
        self.start_ns = Clock.wall_ns()
        self.durations_us: Dict[str, float] = {}
        self.maintenance_wait_us = 0.0

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        begin = Clock.wall_ns()
        try:
            yield
        finally:
            self.durations_us[name] = self.durations_us.get(name, 0.0) + (Clock.wall_ns() - begin) / 1e3

    def gate(self, wait_start_ns: int, slot: OrderedSlot) -> None:
        """Gate wait of this request; time the gate was held by maintenance is kept apart"""
        waited = (Clock.wall_ns() - wait_start_ns) / 1e3
        self.maintenance_wait_us = min(slot.maintenance_wait_us, waited)
        self.durations_us["wait"] = waited - self.maintenance_wait_us

    def total_us(self) -> float:
        return (Clock.wall_ns() - self.start_ns) / 1e3 - self.maintenance_wait_us


@dataclass
class RequestOutcome:
    kind: RequestKind
    t_virtual: float
    hits: List[Tuple[int, float]] = field(default_factory=list)
    candidates: Optional[CandidateSet] = None
    scan: Optional[ScanResult] = None
    item_id: Optional[int] = None
    tier: Optional[str] = None
    prompt: Optional[PromptContext] = None
    answer: Optional[str] = None
    record: Dict[str, object] = field(default_factory=dict)

    @property
    def citations(self) -> List[int]:
        return [item_id for item_id, _ in self.prompt.injected] if self.prompt else []


class RetrievalPipeline:
    """
    Write, recall and ask handlers for one policy run.

    Args:
        store: the memory store of this run
        policy: eligibility policy producing R and consuming feedback
        config: validated engine configuration
        clock: virtual or wall clock
        ordered: context manager factory wrapping the state-touching section;
            yields the request's virtual time
        embed_seed: seed of the synthetic embedder
        embed_noise: topic noise scale of the synthetic embedder
    """

    def __init__(
        self,
        store: MemoryStore,
        policy: EligibilityPolicy,
        config: ValidatedConfig,
        clock: Clock,
        *,
        ordered: Optional[OrderedSection] = None,
        embed_seed: int = 0,
        embed_noise: float = DEFAULT_EMBED_NOISE,
    ):
        self.store = store
        self.view = store.view()
        self.policy = policy
        self.config = config
        self.clock = clock
        self.ordered = ordered or self._unordered
        self.embed_seed = embed_seed
        self.embed_noise = embed_noise
        self.conversation = ConversationBuffer(config.retrieval.conversation_turns)

    @contextmanager
    def _unordered(self, req: AskRequest) -> Iterator[OrderedSlot]:
        with self.store.statement():
            if req.t_virtual is not None and self.clock.mode is ClockMode.VIRTUAL:
                self.clock.set(max(req.t_virtual, self.clock.now()))
            yield OrderedSlot(self.clock.now())

    def embed(self, text: str) -> np.ndarray:
        return embed_query(text, self.config.retrieval.embedding_dim, self.embed_seed, self.embed_noise)

    def _cap(self, req: AskRequest) -> int:
        cap = self.config.retrieval.prompt_cap_n
        if req.n is None:
            return cap
        if req.n > cap or req.n < 1:
            raise CapExceeded(req.n, cap)
        return req.n

    def write(self, req: AskRequest) -> RequestOutcome:
        if not req.query_text.strip():
            raise EmptyContent()
        timer = PhaseTimer()
        with self.store.request_scope():
            with timer.phase("embed"):
                embedding = self.embed(req.query_text)
            wait_start = Clock.wall_ns()
            with self.ordered(req) as slot:
                t_now = slot.t_now
                timer.gate(wait_start, slot)
                with timer.phase("put"):
                    item_id = self.store.put(
                        req.query_text,
                        embedding,
                        req.label_value if req.label_value is not None else 0.0,
                        t_now,
                        req.namespace,
                    )
                    tier = self.store.get(item_id).tier
        outcome = RequestOutcome(RequestKind.WRITE, t_now, item_id=item_id, tier=tier.value)
        outcome.record = self._record(req, outcome, timer)
        return outcome

    def _retrieve(self, req: AskRequest, timer: PhaseTimer, remember: bool) -> Tuple[RequestOutcome, List[str]]:
        n = self._cap(req)
        # embedding runs outside the ordered section
        with timer.phase("embed"):
            query = self.embed(req.query_text)
        wait_start = Clock.wall_ns()
        with self.ordered(req) as slot:
            t_now = slot.t_now
            timer.gate(wait_start, slot)
            with timer.phase("candidates"):
                candidates = self.policy.build(self.view, t_now, req.request_index or 0)
            with timer.phase("scan"):
                scan = self.store.vectors.scan(query, candidates.ids, n)
            with timer.phase("feedback"):
                self.policy.on_feedback(self.view, scan.ids, candidates, t_now)
            conversation = self.conversation.recent(req.namespace)
            if remember:
                self.conversation.push(req.namespace, req.query_text)
        kind = RequestKind.ASK if remember else RequestKind.RECALL
        outcome = RequestOutcome(kind, t_now, hits=scan.hits, candidates=candidates, scan=scan)
        return outcome, conversation

    def recall(self, req: AskRequest) -> RequestOutcome:
        """S = top-n of R by similarity; feedback is applied before returning"""
        timer = PhaseTimer()
        with self.store.request_scope():
            outcome, _ = self._retrieve(req, timer, remember=False)
        outcome.record = self._record(req, outcome, timer)
        return outcome

    def ask(self, req: AskRequest) -> RequestOutcome:
        timer = PhaseTimer()
        with self.store.request_scope():
            outcome, conversation = self._retrieve(req, timer, remember=True)
            with timer.phase("assemble"):
                ids = [item_id for item_id, _ in outcome.hits]
                injected = list(zip(ids, self.store.contents(ids)))
                outcome.prompt = assemble_prompt(req.query_text, conversation, injected)
            with timer.phase("answer"):
                outcome.answer = mock_answer(outcome.prompt)
                delay_us = self.config.retrieval.synthetic_delay_us_per_token
                if delay_us > 0:
                    time.sleep(delay_us * outcome.prompt.token_count / 1e6)
        outcome.record = self._record(req, outcome, timer)
        return outcome

    def _record(self, req: AskRequest, outcome: RequestOutcome, timer: PhaseTimer) -> Dict[str, object]:
        candidates = outcome.candidates
        ids = [item_id for item_id, _ in outcome.hits]
        record: Dict[str, object] = {
            "event": "request",
            "ts_wall": time.time(),
            "t_virtual": outcome.t_virtual,
            "request_index": req.request_index,
            "kind": outcome.kind.value,
            "policy": self.policy.name.value,
            "status": "ok",
            "candidate_size": candidates.size if candidates is not None else 0,
            "hot_size": int(candidates.hot_part.shape[0]) if candidates is not None else 0,
            "warm_size": int(candidates.warm_part.shape[0]) if candidates is not None else 0,
            "bound": self.policy.bound(candidates) if candidates is not None else None,
            "expired": candidates.expired if candidates is not None else 0,
            "vectors_scanned": outcome.scan.vectors_scanned if outcome.scan is not None else 0,
            "injected_count": len(ids),
            "token_count": outcome.prompt.token_count if outcome.prompt is not None else None,
            "injected_ids": ids,
            # evaluation-only ground truth, read after the policy has finished
            "injected_label_values": self.store.labels(ids),
            "injected_similarities": [sim for _, sim in outcome.hits],
            "phase_durations_us": timer.durations_us,
            "latency_us": timer.total_us(),
            "maintenance_wait_us": timer.maintenance_wait_us,
        }
        if outcome.item_id is not None:
            record["item_id"] = outcome.item_id
        return record
