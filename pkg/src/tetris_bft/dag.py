"""Per-validator event DAG ("tetris") with the know / know-well predicates."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Union

from .events import ZERO_DIGEST, Digest, Event, materialize_placeholders

DEFAULT_PENDING_CAP = 10_000


class NotAccepted(KeyError):
    pass


class RejectReason(enum.Enum):
    UNKNOWN_MEMBER = "UnknownMember"
    BAD_SEQUENCE = "BadSequence"
    SELF_PARENT_MISMATCH = "SelfParentMismatch"


@dataclass(frozen=True)
class Accepted:
    digests: tuple[Digest, ...]


@dataclass(frozen=True)
class Pending:
    missing: frozenset[Digest]


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason


InsertResult = Union[Accepted, Pending, Rejected]


@dataclass(frozen=True)
class MissingParentRequest:
    wanted: Digest
    requested_by: int


def fault_bound(n: int) -> int:
    """Return t for a membership of size 3t+1, else raise ValueError."""
    if n < 1 or (n - 1) % 3:
        raise ValueError(f"membership size {n} is not of the form 3t+1")
    return (n - 1) // 3


class Tetris:
    """One validator's DAG of accepted events.

    ``membership`` is the current voting set; ``known`` additionally lists
    creators whose events are stored without voting power (retired members,
    members scheduled to join). Forks are stored, never dropped.

    Every accepted event gets a local index; ancestry is a Python int bitmask
    over those indices. Placeholders are inserted when an event skips
    sequence numbers and become its effective self-parent.
    """

    def __init__(
        self,
        membership: Iterable[int],
        t: Optional[int] = None,
        known: Iterable[int] = (),
        pending_cap: int = DEFAULT_PENDING_CAP,
    ) -> None:
        self.membership = frozenset(membership)
        self.t = fault_bound(len(self.membership)) if t is None else t
        if len(self.membership) != 3 * self.t + 1:
            raise ValueError("membership size must equal 3t+1")
        self.known = set(self.membership) | set(known)
        self.pending_cap = pending_cap

        self.accepted: dict[Digest, Event] = {}
        self.by_creator_seq: dict[tuple[int, int], set[Digest]] = {}
        self.pending: OrderedDict[Digest, tuple[Event, set[Digest]]] = OrderedDict()
        self.fork_records: set[tuple[int, int]] = set()
        self.rejected: dict[Digest, RejectReason] = {}

        self.order: list[Digest] = []
        self._index: dict[Digest, int] = {}
        self._events: list[Event] = []
        self._parents: list[tuple[int, ...]] = []
        self._mask: list[int] = []
        self._heads: list[dict[int, tuple[int, ...]]] = []
        self._forked: dict[int, frozenset[int]] = {}
        self._anc_sets: list[frozenset[Digest]] = []
        self._waiting: dict[Digest, set[Digest]] = {}
        self._by_seq: dict[int, list[int]] = {}

    # -- membership ------------------------------------------------------

    def rotate(self, removed: Iterable[int] = (), added: Iterable[int] = ()) -> None:
        members = (set(self.membership) - set(removed)) | set(added)
        t = fault_bound(len(members))
        self.known |= members
        self.membership = frozenset(members)
        self.t = t

    # -- insertion -------------------------------------------------------

    def insert(self, e: Event) -> InsertResult:
        d = e.self_digest
        if d in self.accepted or d in self.pending:
            return Accepted(())
        if e.vid not in self.known:
            return Rejected(RejectReason.UNKNOWN_MEMBER)
        missing = {p for i, p in enumerate(e.parent_hashes) if (i or p != ZERO_DIGEST) and p not in self.accepted}
        if missing:
            self._park(e, missing)
            return Pending(frozenset(missing))
        newly: list[Digest] = []
        reason = self._accept(e, newly)
        if reason is not None:
            return Rejected(reason)
        self._cascade(d, newly)
        return Accepted(tuple(newly))

    def _park(self, e: Event, missing: set[Digest]) -> None:
        d = e.self_digest
        self.pending[d] = (e, missing)
        for m in missing:
            self._waiting.setdefault(m, set()).add(d)
        while len(self.pending) > self.pending_cap:
            old, (_, old_missing) = self.pending.popitem(last=False)
            for m in old_missing:
                waiters = self._waiting.get(m)
                if waiters is not None:
                    waiters.discard(old)
                    if not waiters:
                        del self._waiting[m]

    def _cascade(self, first: Digest, newly: list[Digest]) -> None:
        queue = [first]
        while queue:
            x = queue.pop()
            for w in sorted(self._waiting.pop(x, ())):
                entry = self.pending.get(w)
                if entry is None:
                    continue
                ev, missing = entry
                missing.discard(x)
                if missing:
                    continue
                del self.pending[w]
                if self._accept(ev, newly) is None:
                    queue.append(w)

    def _accept(self, e: Event, newly: list[Digest]) -> Optional[RejectReason]:
        parents = [self.accepted[p] for p in e.parent_hashes if p != ZERO_DIGEST]
        self_parent = None
        if e.parent_hashes and e.parent_hashes[0] != ZERO_DIGEST:
            self_parent = self.accepted[e.parent_hashes[0]]
            if self_parent.vid != e.vid:
                return self._reject(e, RejectReason.SELF_PARENT_MISMATCH)
        if any(self.accepted[p].vid == e.vid for p in e.parent_hashes[1:]):
            return self._reject(e, RejectReason.SELF_PARENT_MISMATCH)
        if e.seq != max((p.seq for p in parents), default=-1) + 1:
            return self._reject(e, RejectReason.BAD_SEQUENCE)

        eff = [self._index[p.self_digest] for p in parents]
        if self_parent is not None and e.seq > self_parent.seq + 1:
            prev = self._index[self_parent.self_digest]
            for ph in materialize_placeholders(e, self_parent):
                if ph.self_digest not in self.accepted:
                    self._store(ph, (prev,))
                    newly.append(ph.self_digest)
                prev = self._index[ph.self_digest]
            eff[0] = prev
        self._store(e, tuple(eff))
        newly.append(e.self_digest)
        return None

    def _reject(self, e: Event, reason: RejectReason) -> RejectReason:
        self.rejected[e.self_digest] = reason
        return reason

    def _store(self, e: Event, parents: tuple[int, ...]) -> None:
        d = e.self_digest
        idx = len(self.order)
        mask = 1 << idx
        cand: dict[int, set[int]] = {}
        for p in parents:
            mask |= self._mask[p]
            for c, hs in self._heads[p].items():
                cand.setdefault(c, set()).update(hs)
        cand[e.vid] = {idx}
        heads: dict[int, tuple[int, ...]] = {}
        for c, hs in cand.items():
            if len(hs) == 1:
                heads[c] = tuple(hs)
            else:
                heads[c] = tuple(sorted(h for h in hs if not any(h != o and (self._mask[o] >> h) & 1 for o in hs)))

        self.accepted[d] = e
        self.order.append(d)
        self._index[d] = idx
        self._events.append(e)
        self._parents.append(parents)
        self._mask.append(mask)
        self._heads.append(heads)
        self._by_seq.setdefault(e.seq, []).append(idx)
        slot = self.by_creator_seq.setdefault((e.vid, e.seq), set())
        slot.add(d)
        if len(slot) >= 2:
            self.fork_records.add((e.vid, e.seq))

    # -- queries ---------------------------------------------------------

    def __contains__(self, d: Digest) -> bool:
        return d in self.accepted

    def __len__(self) -> int:
        return len(self.order)

    def index(self, d: Digest) -> int:
        try:
            return self._index[d]
        except KeyError:
            raise NotAccepted(d.hex()) from None

    def event(self, d: Digest) -> Event:
        try:
            return self.accepted[d]
        except KeyError:
            raise NotAccepted(d.hex()) from None

    def event_at(self, idx: int) -> Event:
        return self._events[idx]

    def parents_of(self, d: Digest) -> tuple[Digest, ...]:
        """Effective parents: the self-parent slot points at the placeholder
        immediately below when a gap was filled."""
        return tuple(self.order[p] for p in self._parents[self.index(d)])

    def parent_indices(self, idx: int) -> tuple[int, ...]:
        return self._parents[idx]

    def self_parent_index(self, idx: int) -> Optional[int]:
        e = self._events[idx]
        if e.parent_hashes[0] == ZERO_DIGEST:
            return None
        return self._parents[idx][0]

    def indices_from_seq(self, seq: int) -> list[int]:
        """Indices of accepted events with sequence >= ``seq``, in acceptance
        (hence topological) order."""
        out: list[int] = []
        for s, idxs in self._by_seq.items():
            if s >= seq:
                out.extend(idxs)
        out.sort()
        return out

    def events_at(self, vid: int, seq: int) -> list[Event]:
        return [self.accepted[d] for d in sorted(self.by_creator_seq.get((vid, seq), ()))]

    def missing_parents(self) -> set[Digest]:
        return set(self._waiting)

    def is_ancestor_idx(self, a: int, x: int) -> bool:
        return (self._mask[x] >> a) & 1 == 1

    def ancestor_mask(self, d: Digest) -> int:
        return self._mask[self.index(d)]

    def ancestors(self, x: Digest) -> frozenset[Digest]:
        idx = self.index(x)
        sets = self._anc_sets
        for i in range(len(sets), idx + 1):
            acc = {self.order[i]}
            for p in self._parents[i]:
                acc |= sets[p]
            sets.append(frozenset(acc))
        return sets[idx]

    def forked_creators(self, idx: int) -> frozenset[int]:
        """Creators with two distinct events at one sequence number inside
        the ancestry of event ``idx``."""
        cached = self._forked.get(idx)
        if cached is not None:
            return cached
        mask = self._mask[idx]
        out = set()
        for vid, seq in self.fork_records:
            if vid in out:
                continue
            hits = 0
            for d in self.by_creator_seq[(vid, seq)]:
                if (mask >> self._index[d]) & 1:
                    hits += 1
            if hits >= 2:
                out.add(vid)
        result = frozenset(out)
        self._forked[idx] = result
        return result

    def know_idx(self, x: int, y: int) -> bool:
        if not (self._mask[x] >> y) & 1:
            return False
        return self._events[y].vid not in self.forked_creators(x)

    def know_well_idx(
        self, x: int, y: int, members: Optional[frozenset[int]] = None, t: Optional[int] = None
    ) -> bool:
        if not self.know_idx(x, y):
            return False
        members = self.membership if members is None else members
        need = 2 * (self.t if t is None else t) + 1
        forked = self.forked_creators(x)
        heads = self._heads[x]
        count = 0
        for c in members:
            hs = heads.get(c)
            if hs is None or c in forked:
                continue
            for h in hs:
                if (self._mask[h] >> y) & 1:
                    count += 1
                    break
            if count >= need:
                return True
        return False

    def know(self, x: Digest, y: Digest) -> bool:
        return self.know_idx(self.index(x), self.index(y))

    def know_well(self, x: Digest, y: Digest, members: Optional[frozenset[int]] = None, t: Optional[int] = None) -> bool:
        return self.know_well_idx(self.index(x), self.index(y), members, t)

    def sub_tetris(self, x: Digest) -> "SubTetris":
        return SubTetris(self, x)

    def closure_violations(self) -> list[Digest]:
        return [d for d, e in self.accepted.items() if any(p != ZERO_DIGEST and p not in self.accepted for p in e.parent_hashes)]

    # -- export ----------------------------------------------------------

    def to_dot(self, witnesses: Iterable[Digest] = ()) -> str:
        wit = set(witnesses)
        forked = {d for key in self.fork_records for d in self.by_creator_seq[key]}
        lines = ["digraph tetris {", "  rankdir=BT;"]
        for d in self.order:
            e = self.accepted[d]
            attrs = [f'label="{e.label}"']
            if d in forked:
                attrs.append("peripheries=2")
            if d in wit:
                attrs.append('style=filled fillcolor="lightgrey"')
            if e.placeholder:
                attrs.append("shape=box style=dashed" if d not in wit else "shape=box")
            lines.append(f'  "{d.hex()[:16]}" [{" ".join(attrs)}];')
        for d in self.order:
            for p in self.parents_of(d):
                lines.append(f'  "{d.hex()[:16]}" -> "{p.hex()[:16]}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


class SubTetris:
    """Read-only view of the part of a tetris below one event."""

    def __init__(self, tetris: Tetris, top: Digest) -> None:
        self.tetris = tetris
        self.top = top
        self._mask = tetris.ancestor_mask(top)

    def __contains__(self, d: Digest) -> bool:
        idx = self.tetris._index.get(d)
        return idx is not None and (self._mask >> idx) & 1 == 1

    def __iter__(self) -> Iterator[Digest]:
        mask = self._mask
        for i, d in enumerate(self.tetris.order):
            if (mask >> i) & 1:
                yield d

    def __len__(self) -> int:
        return bin(self._mask).count("1")


def consistent_with(a: Tetris, b: Tetris) -> bool:
    """True iff every event held by both stores has the same ancestor set in each."""
    for d in a.accepted.keys() & b.accepted.keys():
        if a.ancestors(d) != b.ancestors(d):
            return False
    return True
