"""Per-stage virtual voting over a tetris.

Events are addressed by their local tetris index throughout this module;
``Tetris.order[idx]`` recovers the digest.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional

from .dag import Accepted, InsertResult, Tetris, fault_bound
from .events import CryptoProvider, Digest, Event, sha256

logger = logging.getLogger(__name__)


class ParentUnassigned(RuntimeError):
    """Round requested for an event before one of its in-stage parents."""


class BadMembershipSize(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    n: int
    t: int
    coin_interval: int = 10
    ancestor_depth: int = 10
    round2_threshold: Optional[int] = None

    def __post_init__(self) -> None:
        if self.n != 3 * self.t + 1:
            raise ValueError(f"n={self.n} is not 3t+1 for t={self.t}")
        if self.coin_interval < 2:
            raise ValueError("coin_interval must be >= 2")
        if self.ancestor_depth < 1:
            raise ValueError("ancestor_depth must be >= 1")
        if self.round2_threshold is None:
            object.__setattr__(self, "round2_threshold", self.t // 2 + 1)
        elif self.round2_threshold < 1:
            raise ValueError("round2_threshold must be positive")

    @classmethod
    def for_size(cls, n: int, **kw) -> "ProtocolParams":
        return cls(n=n, t=fault_bound(n), **kw)


class StageVerdict(enum.Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"


class Decision(NamedTuple):
    value: bool
    round: int
    witness: int


@dataclass
class StageState:
    stage: int
    members: frozenset[int]
    t: int
    round_of: dict[int, int] = field(default_factory=dict)
    witnesses: dict[int, list[int]] = field(default_factory=dict)
    is_witness: set[int] = field(default_factory=set)
    votes: dict[tuple[int, int, bool], bool] = field(default_factory=dict)
    seen_prev: dict[int, tuple[int, ...]] = field(default_factory=dict)
    committable: dict[int, Optional[bool]] = field(default_factory=dict)
    decided_round: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for v in self.members:
            self.committable.setdefault(v, None)

    @property
    def quorum(self) -> int:
        return 2 * self.t + 1

    @property
    def max_round(self) -> int:
        return max(self.witnesses, default=-1)

    def base(self, tetris: Tetris) -> dict[int, Optional[Digest]]:
        """Base event digest per member; the lowest digest when forked."""
        out: dict[int, Optional[Digest]] = {}
        for v in sorted(self.members):
            found = sorted(tetris.by_creator_seq.get((v, self.stage), ()))
            out[v] = found[0] if found else None
        return out

    def witness_counts(self) -> dict[int, int]:
        return {r: len(ws) for r, ws in sorted(self.witnesses.items())}


@dataclass(frozen=True)
class BlockHeader:
    height: int
    tx_root: Digest
    signer: int
    signature: bytes

    @staticmethod
    def signing_digest(height: int, tx_root: Digest) -> Digest:
        return sha256(struct.pack(">Q", height) + tx_root)

    def verify(self, crypto: CryptoProvider) -> bool:
        return crypto.verify(self.signer, self.signing_digest(self.height, self.tx_root), self.signature)

    def encode(self) -> bytes:
        return struct.pack(">QI", self.height, self.signer) + self.tx_root + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        height, signer = struct.unpack_from(">QI", data, 0)
        tx_root = data[12:44]
        (n,) = struct.unpack_from(">H", data, 44)
        return cls(height, tx_root, signer, data[46: 46 + n])


@dataclass
class Block:
    height: int
    txids: tuple[Digest, ...]
    headers: dict[int, BlockHeader] = field(default_factory=dict)

    @property
    def tx_root(self) -> Digest:
        return tx_root(self.txids)

    def add_header(self, h: BlockHeader, crypto: CryptoProvider) -> bool:
        if h.height != self.height or h.tx_root != self.tx_root or not h.verify(crypto):
            return False
        self.headers.setdefault(h.signer, h)
        return True

    def confirmed(self, t: int) -> bool:
        return len(self.headers) >= t + 1


def tx_root(txids: Iterable[Digest]) -> Digest:
    return sha256(b"".join(sorted(txids)))


# -- rounds and witnesses -------------------------------------------------


def assign_round(tetris: Tetris, state: StageState, idx: int) -> int:
    cached = state.round_of.get(idx)
    if cached is not None:
        return cached
    e = tetris.event_at(idx)
    if e.seq < state.stage:
        raise ValueError(f"{e.label} lies below stage {state.stage}")
    if e.seq == state.stage:
        state.round_of[idx] = 0
        return 0
    r = 0
    for p in tetris.parent_indices(idx):
        pe = tetris.event_at(p)
        if pe.seq < state.stage or pe.vid not in state.members:
            continue
        pr = state.round_of.get(p)
        if pr is None:
            raise ParentUnassigned(f"parent {pe.label} of {e.label} has no round yet")
        if pr > r:
            r = pr
    seen = 0
    for w in state.witnesses.get(r, ()):
        if tetris.know_well_idx(idx, w, state.members, state.t):
            seen += 1
            if seen >= state.quorum:
                break
    result = r + 1 if seen >= state.quorum else r
    state.round_of[idx] = result
    return result


def _is_first_in_round(tetris: Tetris, state: StageState, idx: int) -> bool:
    e = tetris.event_at(idx)
    if e.seq == state.stage:
        return True
    sp = tetris.self_parent_index(idx)
    if sp is None or tetris.event_at(sp).seq < state.stage:
        return True
    return state.round_of[idx] > state.round_of[sp]


def place_event(tetris: Tetris, state: StageState, idx: int) -> bool:
    """Assign a round to ``idx`` and register it if it is a witness.

    Returns True for a newly found witness. Events below the stage floor or
    by non-members are ignored.
    """
    e = tetris.event_at(idx)
    if e.seq < state.stage or e.vid not in state.members or idx in state.round_of:
        return False
    r = assign_round(tetris, state, idx)
    if not _is_first_in_round(tetris, state, idx):
        return False
    state.is_witness.add(idx)
    ws = state.witnesses.setdefault(r, [])
    ws.append(idx)
    ws.sort(key=lambda i: (tetris.event_at(i).vid, tetris.order[i]))
    return True


def find_witnesses(tetris: Tetris, state: StageState) -> dict[int, list[int]]:
    """Recompute witnesses from scratch: per (creator, round), the event(s)
    with minimal sequence number. Fork branches tie and are all kept."""
    best: dict[tuple[int, int], list[int]] = {}
    for idx, r in state.round_of.items():
        e = tetris.event_at(idx)
        key = (e.vid, r)
        cur = best.get(key)
        if cur is None or tetris.event_at(cur[0]).seq > e.seq:
            best[key] = [idx]
        elif tetris.event_at(cur[0]).seq == e.seq:
            cur.append(idx)
    out: dict[int, list[int]] = {}
    for (_, r), idxs in best.items():
        out.setdefault(r, []).extend(idxs)
    for r in out:
        out[r].sort(key=lambda i: (tetris.event_at(i).vid, tetris.order[i]))
    return dict(sorted(out.items()))


def seen_witnesses(tetris: Tetris, state: StageState, w: int) -> tuple[int, ...]:
    """Witnesses of the previous round that ``w`` knows well."""
    cached = state.seen_prev.get(w)
    if cached is None:
        r = state.round_of[w]
        cached = tuple(x for x in state.witnesses.get(r - 1, ()) if tetris.know_well_idx(w, x, state.members, state.t))
        state.seen_prev[w] = cached
    return cached


def base_indices(tetris: Tetris, state: StageState, b: int) -> list[int]:
    return sorted(tetris.index(d) for d in tetris.by_creator_seq.get((b, state.stage), ()))


# -- voting ---------------------------------------------------------------


def _tally(tetris, state, params, w, b, coin, crypto) -> tuple[bool, int]:
    votes = [vote(tetris, state, params, x, b, coin, crypto) for x in seen_witnesses(tetris, state, w)]
    trues = sum(votes)
    falses = len(votes) - trues
    return (True, trues) if trues >= falses else (False, falses)


def vote(
    tetris: Tetris,
    state: StageState,
    params: ProtocolParams,
    w: int,
    b: int,
    coin: bool = False,
    crypto: Optional[CryptoProvider] = None,
) -> bool:
    """Vote of witness ``w`` on member ``b``'s base event.

    Votes depend only on the ancestry of ``w`` and are memoized. With
    ``coin`` set, witnesses in rounds divisible by the coin interval that
    lack a 2t+1 supermajority take the coin bit of their own signature.
    """
    key = (w, b, coin)
    cached = state.votes.get(key)
    if cached is not None:
        return cached
    r = state.round_of[w]
    if r == 0:
        raise ValueError("base events do not vote")
    if r == 1:
        v = any(tetris.know_well_idx(w, x, state.members, state.t) for x in base_indices(tetris, state, b))
    elif r == 2:
        s = seen_witnesses(tetris, state, w)
        v = sum(vote(tetris, state, params, x, b, coin, crypto) for x in s) >= params.round2_threshold
    else:
        v, n = _tally(tetris, state, params, w, b, coin, crypto)
        if coin and r % params.coin_interval == 0 and n < state.quorum:
            if crypto is None:
                raise ValueError("coin rounds need a crypto provider")
            v = bool(crypto.coin_bit(tetris.event_at(w).signature))
    state.votes[key] = v
    return v


def scan_decision(
    tetris: Tetris,
    state: StageState,
    b: int,
    params: ProtocolParams,
    coin: bool = False,
    crypto: Optional[CryptoProvider] = None,
) -> Optional[Decision]:
    """One full pass of the decision loop over the current witnesses,
    ignoring any cached verdict."""
    for r in range(3, state.max_round + 1):
        if coin and r % params.coin_interval == 0:
            continue
        for w in state.witnesses.get(r, ()):
            v, n = _tally(tetris, state, params, w, b, coin, crypto)
            if n >= state.quorum:
                return Decision(v, r, w)
    return None


def _decide(tetris, state, b, params, coin, crypto) -> Optional[bool]:
    cached = state.committable.get(b)
    if cached is not None:
        return cached
    d = scan_decision(tetris, state, b, params, coin, crypto)
    if d is None:
        return None
    state.committable[b] = d.value
    state.decided_round[b] = d.round
    return d.value


def decide(tetris: Tetris, state: StageState, b: int, params: ProtocolParams) -> Optional[bool]:
    """Committable verdict for member ``b``: True, False, or None while undecided."""
    return _decide(tetris, state, b, params, False, None)


def decide_with_coin(
    tetris: Tetris, state: StageState, b: int, params: ProtocolParams, crypto: CryptoProvider
) -> Optional[bool]:
    return _decide(tetris, state, b, params, True, crypto)


def stage_verdict(state: StageState) -> StageVerdict:
    if all(state.committable.get(v) is not None for v in state.members):
        return StageVerdict.COMPLETE
    return StageVerdict.INCOMPLETE


# -- commitment -----------------------------------------------------------


def committed_base(tetris: Tetris, state: StageState, b: int) -> Optional[int]:
    """The base event of ``b`` that a true verdict refers to.

    With a forked base only the branch known well by some round-1 witness
    can carry a true vote, and at most one branch can be known well.
    """
    branches = base_indices(tetris, state, b)
    if len(branches) <= 1:
        return branches[0] if branches else None
    for x in branches:
        if any(tetris.know_well_idx(w, x, state.members, state.t) for w in state.witnesses.get(1, ())):
            return x
    return None


def collect_committable_txs(
    tetris: Tetris,
    state: StageState,
    params: ProtocolParams,
    already_committed: Iterable[Digest] = (),
) -> list[Digest]:
    """Txids referenced under at least t+1 distinct true base events,
    looking no deeper than ``ancestor_depth`` below the stage."""
    floor = state.stage - params.ancestor_depth
    window = tetris.indices_from_seq(floor)
    holders: dict[Digest, set[int]] = {}
    for b in sorted(state.members):
        if state.committable.get(b) is not True:
            continue
        base = committed_base(tetris, state, b)
        if base is None or tetris.event_at(base).placeholder:
            continue
        mask = tetris._mask[base]
        seen: set[Digest] = set()
        for i in window:
            if (mask >> i) & 1:
                seen |= tetris.event_at(i).tx_hashes
        for tx in seen:
            holders.setdefault(tx, set()).add(b)
    done = set(already_committed)
    return sorted(tx for tx, vs in holders.items() if len(vs) >= state.t + 1 and tx not in done)


def build_block(state: StageState, txids: Iterable[Digest], signer: int, crypto: CryptoProvider) -> BlockHeader:
    root = tx_root(txids)
    sig = crypto.sign(signer, BlockHeader.signing_digest(state.stage, root))
    return BlockHeader(state.stage, root, signer, sig)


def advance_stage(state: StageState, rotation: Optional[tuple[Iterable[int], Iterable[int]]] = None) -> StageState:
    members = set(state.members)
    if rotation is not None:
        removed, added = rotation
        members = (members - set(removed)) | set(added)
    try:
        t = fault_bound(len(members))
    except ValueError as exc:
        raise BadMembershipSize(str(exc)) from None
    return StageState(state.stage + 1, frozenset(members), t)


# -- engine ---------------------------------------------------------------


@dataclass
class StageRecord:
    stage: int
    members: tuple[int, ...]
    committable: dict[int, bool]
    committed_txids: tuple[Digest, ...]
    rounds_to_decision: dict[int, int]
    witness_counts: dict[int, int]
    tx_root: Digest


RotationHook = Callable[[int], Optional[tuple[Iterable[int], Iterable[int]]]]


class ConsensusEngine:
    """One validator's consensus state machine.

    Feed events through ``ingest``; completed stages produce a
    ``StageRecord``, a block and an outgoing signed header. With ``audit``
    set, decided verdicts are recomputed from scratch after every insertion
    and any disagreement is logged in ``violations``.
    """

    def __init__(
        self,
        vid: int,
        tetris: Tetris,
        params: ProtocolParams,
        crypto: CryptoProvider,
        use_coin: bool = True,
        audit: bool = False,
        rotation_hook: Optional[RotationHook] = None,
    ) -> None:
        self.vid = vid
        self.tetris = tetris
        self.params = params
        self.crypto = crypto
        self.use_coin = use_coin
        self.audit = audit
        self.rotation_hook = rotation_hook
        self.state = StageState(0, tetris.membership, tetris.t)
        self.history: list[StageState] = []
        self.records: list[StageRecord] = []
        self.blocks: dict[int, Block] = {}
        self.block_t: dict[int, int] = {}
        self.early_headers: dict[int, list[BlockHeader]] = {}
        self.outbox: list[BlockHeader] = []
        self.committed: set[Digest] = set()
        self.violations: list[dict] = []

    @property
    def completed_stages(self) -> int:
        return len(self.records)

    def decide(self, b: int) -> Optional[bool]:
        return _decide(self.tetris, self.state, b, self.params, self.use_coin, self.crypto)

    def ingest(self, e: Event) -> InsertResult:
        res = self.tetris.insert(e)
        if isinstance(res, Accepted) and res.digests:
            self._process([self.tetris.index(d) for d in res.digests])
        return res

    def _process(self, indices: Iterable[int]) -> None:
        found = False
        for idx in indices:
            found |= place_event(self.tetris, self.state, idx)
        if found:
            self._run_decisions()
        while stage_verdict(self.state) is StageVerdict.COMPLETE:
            self._finish_stage()
            found = False
            for idx in self.tetris.indices_from_seq(self.state.stage):
                found |= place_event(self.tetris, self.state, idx)
            if found:
                self._run_decisions()

    def _run_decisions(self) -> None:
        s = self.state
        for b in sorted(s.members):
            before = s.committable.get(b)
            if before is None:
                self.decide(b)
            elif self.audit:
                fresh = scan_decision(self.tetris, s, b, self.params, self.use_coin, self.crypto)
                if fresh is None or fresh.value != before:
                    self.violations.append(
                        {"check": "decision_stability", "stage": s.stage, "base": b, "was": before,
                         "now": None if fresh is None else fresh.value}
                    )

    def _check_witness_structure(self) -> None:
        s = self.state
        for r, ws in s.witnesses.items():
            if s.witnesses.get(r + 1) and len(ws) < s.quorum:
                self.violations.append({"check": "witness_structure", "stage": s.stage, "round": r,
                                        "detail": f"{len(ws)} witnesses below a non-empty round {r + 1}"})
            if r >= 1:
                for w in ws:
                    k = len(seen_witnesses(self.tetris, s, w))
                    if k < s.quorum:
                        # a round inherited from a parent is not re-earned when
                        # a fork in the ancestry removes a creator from the count
                        self.violations.append({
                            "check": "witness_floor", "stage": s.stage, "round": r,
                            "witness": self.tetris.event_at(w).label, "known_well": k,
                            "forked_ancestry": sorted(self.tetris.forked_creators(w)),
                        })

    def _finish_stage(self) -> None:
        s = self.state
        self._check_witness_structure()
        true_count = sum(1 for v in s.committable.values() if v)
        if true_count < s.t + 1:
            self.violations.append({"check": "liveness_floor", "stage": s.stage, "true_count": true_count})
        txids = collect_committable_txs(self.tetris, s, self.params, self.committed)
        self.committed.update(txids)
        header = build_block(s, txids, self.vid, self.crypto)
        block = Block(s.stage, tuple(txids))
        block.add_header(header, self.crypto)
        for h in self.early_headers.pop(s.stage, ()):
            block.add_header(h, self.crypto)
        self.blocks[s.stage] = block
        self.block_t[s.stage] = s.t
        self.outbox.append(header)
        self.records.append(StageRecord(
            stage=s.stage,
            members=tuple(sorted(s.members)),
            committable={v: bool(c) for v, c in sorted(s.committable.items())},
            committed_txids=tuple(txids),
            rounds_to_decision=dict(sorted(s.decided_round.items())),
            witness_counts=s.witness_counts(),
            tx_root=block.tx_root,
        ))
        logger.debug("validator %d completed stage %d: %s", self.vid, s.stage, s.committable)
        rotation = self.rotation_hook(s.stage) if self.rotation_hook else None
        self.history.append(s)
        self.state = advance_stage(s, rotation)
        if rotation is not None:
            self.tetris.rotate(*rotation)

    def receive_header(self, h: BlockHeader) -> None:
        block = self.blocks.get(h.height)
        if block is None:
            if h.verify(self.crypto):
                self.early_headers.setdefault(h.height, []).append(h)
            return
        block.add_header(h, self.crypto)

    def confirmed(self, height: int) -> bool:
        block = self.blocks.get(height)
        return block is not None and block.confirmed(self.block_t[height])

    def stage_state(self, stage: int) -> StageState:
        if stage == self.state.stage:
            return self.state
        for s in self.history:
            if s.stage == stage:
                return s
        raise KeyError(stage)


# -- explanation ----------------------------------------------------------


@dataclass
class VoteRow:
    round: int
    witness: str
    vote: bool
    trues: int
    seen: int
    coin_round: bool = False
    decides: bool = False


def vote_table(
    tetris: Tetris,
    state: StageState,
    b: int,
    params: ProtocolParams,
    coin: bool = False,
    crypto: Optional[CryptoProvider] = None,
) -> tuple[list[VoteRow], Optional[Decision]]:
    """Per-round witness votes on ``b``'s base event, up to the deciding
    witness (or every round when undecided)."""
    rows: list[VoteRow] = []
    decision = scan_decision(tetris, state, b, params, coin, crypto)
    last = decision.round if decision else state.max_round
    for r in range(1, last + 1):
        coin_round = coin and r >= 3 and r % params.coin_interval == 0
        for w in state.witnesses.get(r, ()):
            s = seen_witnesses(tetris, state, w) if r >= 2 else ()
            trues = sum(vote(tetris, state, params, x, b, coin, crypto) for x in s)
            v = vote(tetris, state, params, w, b, coin, crypto)
            hit = decision is not None and decision.witness == w
            rows.append(VoteRow(r, tetris.event_at(w).label, v, trues, len(s), coin_round, hit))
            if hit:
                return rows, decision
    return rows, decision
