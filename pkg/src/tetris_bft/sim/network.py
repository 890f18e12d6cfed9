"""Deterministic discrete-event network and validator processes.

Time is an integer step counter. All randomness comes from one
``random.Random(seed)`` consumed in a fixed order, so a configuration
reruns to the same trace.
"""

from __future__ import annotations

import enum
import heapq
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..consensus import BlockHeader, ConsensusEngine
from ..dag import Accepted, Pending, Tetris
from ..events import (
    ZERO_DIGEST,
    Digest,
    DeterministicCrypto,
    Event,
    create_event,
    decode_wire,
    encode_wire,
    sha256,
    verify_event,
)
from .dht import EVENT_TAG, TX_TAG, TempDht, content_key
from .scenario import ScenarioConfig, Strategy, StrategyKind

logger = logging.getLogger(__name__)

DHT_NODE = -1


class MsgKind(enum.Enum):
    EVENT_ANNOUNCE = "EventAnnounce"
    TX_ANNOUNCE = "TxAnnounce"
    PULL_REQUEST = "PullRequest"
    PULL_RESPONSE = "PullResponse"
    HEADER_ANNOUNCE = "HeaderAnnounce"


@dataclass(frozen=True)
class NetMessage:
    kind: MsgKind
    sender: int
    to: int
    body: bytes
    deliver_at: int


@dataclass
class Node:
    vid: int
    strategy: Strategy
    engine: ConsensusEngine
    last_created: Optional[Event] = None
    fresh_events: list[Digest] = field(default_factory=list)
    fresh_txs: dict[Digest, None] = field(default_factory=dict)
    seen_txs: set[Digest] = field(default_factory=set)
    wanted: set[Digest] = field(default_factory=set)
    created: int = 0

    @property
    def tetris(self) -> Tetris:
        return self.engine.tetris

    def is_member(self) -> bool:
        return self.vid in self.engine.state.members

    def silent_at(self, step: int) -> bool:
        return self.strategy.kind is StrategyKind.SILENT and step >= self.strategy.after_step


def fork_branches(vid: int, strategy: Strategy, recipients: Iterable[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Recipient sets for a forker; defaults split the others in half."""
    if strategy.branch_a or strategy.branch_b:
        return tuple(strategy.branch_a), tuple(strategy.branch_b)
    others = sorted(v for v in recipients if v != vid)
    half = max(1, len(others) // 2)
    return tuple(others[:half]), tuple(others[half:])


def schedule_broadcast(
    vid: int,
    e: Event,
    strategy: Strategy,
    recipients: Iterable[int],
    now: int,
    delay,
    branch: Optional[str] = None,
) -> list[NetMessage]:
    """Messages a validator emits for one event under its strategy.

    ``delay(sender, receiver)`` draws a delivery delay. ``branch`` selects
    the recipient half for a forker's equivocating pair ("a" or "b").
    """
    others = [v for v in sorted(recipients) if v != vid]
    kind = strategy.kind
    if kind is StrategyKind.SILENT and now >= strategy.after_step:
        return []
    if kind is StrategyKind.SELECTIVE:
        omit = set(strategy.omit)
        others = [v for v in others if v not in omit]
    elif kind is StrategyKind.FORKER and branch is not None:
        a, b = fork_branches(vid, strategy, recipients)
        others = [v for v in others if v in (a if branch == "a" else b)]
    body = EVENT_TAG + encode_wire(e)
    return [NetMessage(MsgKind.EVENT_ANNOUNCE, vid, v, body, now + delay(vid, v)) for v in others]


class Simulation:
    def __init__(self, cfg: ScenarioConfig, engine_factory=None) -> None:
        self.cfg = cfg.validate()
        self.rng = random.Random(cfg.seed)
        self.crypto = DeterministicCrypto(cfg.seed)
        self.dht = TempDht(content_key)
        self.now = 0
        self.queue: list[tuple[int, int, NetMessage]] = []
        self._counter = 0
        self.message_count = 0
        self.byte_count = 0
        self.tx_injected = 0
        self.universe = cfg.universe
        self.splitter = next(
            (v for v, s in sorted(cfg.adversaries.items()) if s.kind is StrategyKind.VOTE_SPLITTER), None
        )
        rotations = {r.at_stage: (r.remove, r.add) for r in cfg.rotations}
        initial = list(range(cfg.n))
        params = cfg.params
        engine_factory = engine_factory or ConsensusEngine
        self.nodes: dict[int, Node] = {}
        for vid in self.universe:
            tetris = Tetris(initial, known=self.universe)
            engine = engine_factory(
                vid, tetris, params, self.crypto, use_coin=cfg.use_coin, audit=cfg.audit,
                rotation_hook=rotations.get,
            )
            self.nodes[vid] = Node(vid, cfg.strategy(vid), engine)
        self.steps_run = 0

    # -- transport -------------------------------------------------------

    def _delay(self, sender: int, receiver: int) -> int:
        lo, hi = self.cfg.delay_min, self.cfg.delay_max
        if self.splitter is None or hi == lo:
            return self.rng.randint(lo, hi)
        # adversarial scheduling: fast inside a group, slow across groups,
        # with groups reshuffled every period steps
        period = self.cfg.strategy(self.splitter).period
        phase = self.now // period
        mid = (lo + hi) // 2
        if ((sender + phase) % 2) == ((receiver + phase) % 2) or DHT_NODE in (sender, receiver):
            return self.rng.randint(lo, mid)
        return self.rng.randint(max(mid, lo + 1) if hi > lo else lo, hi)

    def _enqueue(self, msg: NetMessage) -> None:
        at = msg.deliver_at
        if self.cfg.drop_rate > 0:
            sent = self.now
            while self.rng.random() < self.cfg.drop_rate:
                self.message_count += 1
                self.byte_count += len(msg.body)
                sent += self.cfg.retransmit_interval
                at = sent + self._delay(msg.sender, msg.to)
        self.message_count += 1
        self.byte_count += len(msg.body)
        self._push(at, msg)

    def _push(self, at: int, msg: NetMessage) -> None:
        self._counter += 1
        heapq.heappush(self.queue, (at, self._counter, msg))

    def send(self, kind: MsgKind, sender: int, to: int, body: bytes, extra_delay: int = 0) -> None:
        at = self.now + extra_delay + self._delay(sender, to)
        self._enqueue(NetMessage(kind, sender, to, body, at))

    def _partition_end(self, a: int, b: int) -> Optional[int]:
        for p in self.cfg.partitions:
            if p.separates(a, b, self.now):
                return p.end
        return None

    # -- validator behaviour ----------------------------------------------

    def _pull(self, node: Node, digest: Digest, extra_delay: int = 0) -> None:
        node.wanted.add(digest)
        self.send(MsgKind.PULL_REQUEST, node.vid, DHT_NODE, digest, extra_delay)

    def _receive_event(self, node: Node, e: Event) -> None:
        if e.self_digest in node.tetris.accepted:
            return
        if verify_event(e, self.crypto) is not None:
            logger.debug("node %d dropped invalid event %s", node.vid, e.label)
            return
        res = node.engine.ingest(e)
        if isinstance(res, Pending):
            for m in sorted(res.missing):
                if m not in node.wanted:
                    self._pull(node, m)
        elif isinstance(res, Accepted):
            for d in res.digests:
                node.wanted.discard(d)
                ev = node.tetris.accepted[d]
                if ev.vid != node.vid and not ev.placeholder:
                    node.fresh_events.append(d)
        self._flush_headers(node)

    def _receive_tx(self, node: Node, payload: bytes) -> None:
        txid = sha256(payload)
        if txid in node.seen_txs or node.silent_at(self.now):
            return
        node.seen_txs.add(txid)
        node.fresh_txs[txid] = None

    def _flush_headers(self, node: Node) -> None:
        engine = node.engine
        while engine.outbox:
            h = engine.outbox.pop(0)
            if node.silent_at(self.now):
                continue
            for v in self.universe:
                if v != node.vid:
                    self.send(MsgKind.HEADER_ANNOUNCE, node.vid, v, h.encode())

    def _deliver(self, msg: NetMessage) -> None:
        if msg.to != DHT_NODE and msg.sender != DHT_NODE:
            end = self._partition_end(msg.sender, msg.to)
            if end is not None:
                self._push(end + self._delay(msg.sender, msg.to), msg)
                return
        if msg.kind is MsgKind.PULL_REQUEST:
            body = self.dht.get(msg.body)
            self.send(MsgKind.PULL_RESPONSE, DHT_NODE, msg.sender, msg.body + (body or b""))
            return
        node = self.nodes[msg.to]
        if msg.kind is MsgKind.EVENT_ANNOUNCE:
            self._receive_event(node, decode_wire(msg.body[1:]))
        elif msg.kind is MsgKind.TX_ANNOUNCE:
            self._receive_tx(node, msg.body[1:])
        elif msg.kind is MsgKind.HEADER_ANNOUNCE:
            node.engine.receive_header(BlockHeader.decode(msg.body))
        elif msg.kind is MsgKind.PULL_RESPONSE:
            key, body = msg.body[:32], msg.body[32:]
            if key in node.tetris.accepted:
                node.wanted.discard(key)
            elif not body:
                self._pull(node, key, self.cfg.retransmit_interval)
            elif body[:1] == EVENT_TAG:
                self._receive_event(node, decode_wire(body[1:]))

    def inject_tx(self, payload: bytes) -> None:
        entry = self.nodes[self.rng.randrange(self.cfg.n)]
        self._receive_tx(entry, payload)
        if entry.silent_at(self.now) or entry.strategy.kind is StrategyKind.DHT_WITHHOLDER:
            return
        body = TX_TAG + payload
        self.dht.put(sha256(payload), body, self.cfg.dht_ttl)
        omit = set(entry.strategy.omit) if entry.strategy.kind is StrategyKind.SELECTIVE else set()
        for v in self.universe:
            if v != entry.vid and v not in omit:
                self.send(MsgKind.TX_ANNOUNCE, entry.vid, v, body)

    def _create(self, node: Node) -> None:
        if not node.is_member() or node.silent_at(self.now):
            return
        genesis = node.last_created is None and self.now == 0
        if not (genesis or node.fresh_events or node.fresh_txs):
            return
        tetris = node.tetris
        others = [tetris.accepted[d] for d in node.fresh_events]
        txs = list(node.fresh_txs)
        node.fresh_events.clear()
        node.fresh_txs.clear()
        kind = node.strategy.kind
        if kind is StrategyKind.DHT_WITHHOLDER:
            self._create_withheld(node, others, txs)
            return
        prev = node.last_created
        e = create_event(node.vid, prev, others, txs, self.crypto)
        fork = kind is StrategyKind.FORKER and e.seq in node.strategy.fork_seqs
        self.dht.put(e.self_digest, EVENT_TAG + encode_wire(e), self.cfg.dht_ttl)
        node.last_created = e
        node.created += 1
        self._ingest_own(node, e)
        if fork:
            fake = sha256(b"fork" + struct.pack(">II", node.vid, e.seq))
            twin = create_event(node.vid, prev, others, set(txs) | {fake}, self.crypto)
            self.dht.put(twin.self_digest, EVENT_TAG + encode_wire(twin), self.cfg.dht_ttl)
            self._ingest_own(node, twin)
            for branch, ev in (("a", e), ("b", twin)):
                for m in schedule_broadcast(node.vid, ev, node.strategy, self.universe, self.now, self._delay, branch):
                    self._enqueue(m)
        else:
            for m in schedule_broadcast(node.vid, e, node.strategy, self.universe, self.now, self._delay):
                self._enqueue(m)

    def _create_withheld(self, node: Node, others: list[Event], txs: list[Digest]) -> None:
        """Sign an event referencing a body that exists nowhere; receivers can
        never resolve it."""
        fake = sha256(b"withheld" + struct.pack(">II", node.vid, node.created))
        prev = node.last_created
        seq = max([p.seq for p in others] + ([prev.seq] if prev else []), default=-1) + 1
        parents = (prev.self_digest if prev else ZERO_DIGEST,) + tuple(p.self_digest for p in others) + (fake,)
        unsigned = Event(node.vid, seq, parents, frozenset(txs))
        e = Event(node.vid, seq, parents, unsigned.tx_hashes, self.crypto.sign(node.vid, unsigned.self_digest), unsigned.self_digest)
        node.last_created = e
        node.created += 1
        for m in schedule_broadcast(node.vid, e, node.strategy, self.universe, self.now, self._delay):
            self._enqueue(m)

    def _ingest_own(self, node: Node, e: Event) -> None:
        node.engine.ingest(e)
        self._flush_headers(node)

    # -- main loop -------------------------------------------------------

    def honest_nodes(self) -> list[Node]:
        return [n for v, n in sorted(self.nodes.items()) if n.strategy.honest]

    def done(self) -> bool:
        target = self.cfg.target_stages
        for node in self.honest_nodes():
            if node.engine.completed_stages < target:
                return False
            if not all(node.engine.confirmed(h) for h in range(target)):
                return False
        return True

    def step(self) -> None:
        self.dht.now = self.now
        if self.tx_injected < self.cfg.tx_total:
            for _ in range(min(self.cfg.tx_rate, self.cfg.tx_total - self.tx_injected)):
                self.inject_tx(b"tx:%d:%d" % (self.cfg.seed, self.tx_injected))
                self.tx_injected += 1
        while self.queue and self.queue[0][0] <= self.now:
            _, _, msg = heapq.heappop(self.queue)
            self._deliver(msg)
        for vid in self.universe:
            self._create(self.nodes[vid])

    def run(self) -> "Simulation":
        for step in range(self.cfg.max_steps):
            self.now = step
            self.step()
            self.steps_run = step + 1
            if self.done():
                break
        return self
