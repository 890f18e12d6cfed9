"""Events, transactions, canonical encoding and the signature provider."""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

Digest = bytes

DIGEST_SIZE = 32
ZERO_DIGEST: Digest = bytes(DIGEST_SIZE)


def sha256(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


class OtherParentBySelf(ValueError):
    """An other-parent was created by the event's own creator."""


class NotAGap(ValueError):
    """Placeholders requested for consecutive sequence numbers."""


class Violation(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    BAD_DIGEST = "BadDigest"
    DUPLICATE_PARENT = "DuplicateParent"
    SELF_PARENT_SLOT_MISUSE = "SelfParentSlotMisuse"


@dataclass(frozen=True)
class Transaction:
    payload: bytes
    txid: Digest = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "txid", sha256(self.payload))


@dataclass(frozen=True)
class Event:
    """A signed consensus message.

    ``parent_hashes[0]`` is always the self-parent slot (``ZERO_DIGEST`` at the
    start of a creator's chain). ``self_digest`` covers every field except the
    signature; it is computed on construction unless a claimed value is given
    (as when decoding from the wire), in which case ``verify_event`` checks it.
    ``placeholder`` is a local flag and never encoded.
    """

    vid: int
    seq: int
    parent_hashes: tuple[Digest, ...]
    tx_hashes: frozenset[Digest] = frozenset()
    signature: bytes = b""
    self_digest: Digest = b""
    placeholder: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.parent_hashes, tuple):
            object.__setattr__(self, "parent_hashes", tuple(self.parent_hashes))
        if not isinstance(self.tx_hashes, frozenset):
            object.__setattr__(self, "tx_hashes", frozenset(self.tx_hashes))
        if not self.self_digest:
            object.__setattr__(self, "self_digest", hash_event(self))

    @property
    def self_parent(self) -> Digest:
        return self.parent_hashes[0] if self.parent_hashes else ZERO_DIGEST

    @property
    def other_parents(self) -> tuple[Digest, ...]:
        return self.parent_hashes[1:]

    @property
    def label(self) -> str:
        return f"{self.vid}:{self.seq}"


def canonical_encode(e: Event) -> bytes:
    """Bit-exact digest/wire encoding of an event's signed content.

    Layout: vid u32 BE, seq u64 BE, parent count u32 BE + digests in stored
    order, tx count u32 BE + digests in ascending byte order.
    """
    txs = sorted(e.tx_hashes)
    parts = [
        struct.pack(">IQI", e.vid, e.seq, len(e.parent_hashes)),
        *e.parent_hashes,
        struct.pack(">I", len(txs)),
        *txs,
    ]
    return b"".join(parts)


def hash_event(e: Event) -> Digest:
    return sha256(canonical_encode(e))


def encode_wire(e: Event) -> bytes:
    """Canonical encoding followed by a u16-length-prefixed signature."""
    return canonical_encode(e) + struct.pack(">H", len(e.signature)) + e.signature


def decode_wire(data: bytes, claimed_digest: Optional[Digest] = None) -> Event:
    vid, seq, n_parents = struct.unpack_from(">IQI", data, 0)
    off = 16
    parents = tuple(data[off + i * DIGEST_SIZE: off + (i + 1) * DIGEST_SIZE] for i in range(n_parents))
    off += n_parents * DIGEST_SIZE
    (n_txs,) = struct.unpack_from(">I", data, off)
    off += 4
    txs = frozenset(data[off + i * DIGEST_SIZE: off + (i + 1) * DIGEST_SIZE] for i in range(n_txs))
    off += n_txs * DIGEST_SIZE
    (sig_len,) = struct.unpack_from(">H", data, off)
    off += 2
    sig = data[off: off + sig_len]
    if len(sig) != sig_len or off + sig_len != len(data):
        raise ValueError("truncated or oversized event encoding")
    return Event(vid, seq, parents, txs, sig, claimed_digest or b"")


def wire_digest(data: bytes) -> Digest:
    """Event digest of a wire body (the hash of its canonical prefix)."""
    return decode_wire(data).self_digest


class CryptoProvider(Protocol):
    def sign(self, vid: int, digest: Digest) -> bytes: ...

    def verify(self, vid: int, digest: Digest, signature: bytes) -> bool: ...

    def coin_bit(self, signature: bytes) -> int: ...


class DeterministicCrypto:
    """Keyed-hash signatures for simulation.

    Each validator's secret is derived from a run-wide seed; a signature is
    HMAC-SHA256(secret, digest). Nothing outside the provider can produce a
    valid signature for another validator, and the bytes are pseudorandom,
    which is all the coin needs.
    """

    COIN_BIT = 4

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self._keys: dict[int, bytes] = {}

    def _key(self, vid: int) -> bytes:
        key = self._keys.get(vid)
        if key is None:
            key = sha256(b"tetris-sim-key" + struct.pack(">qI", self.seed, vid))
            self._keys[vid] = key
        return key

    def sign(self, vid: int, digest: Digest) -> bytes:
        return hmac.new(self._key(vid), digest, hashlib.sha256).digest()

    def verify(self, vid: int, digest: Digest, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(vid, digest), signature)

    def coin_bit(self, signature: bytes) -> int:
        if not signature:
            return 0
        return (signature[len(signature) // 2] >> self.COIN_BIT) & 1


def create_event(
    vid: int,
    self_parent: Optional[Event],
    other_parents: Sequence[Event],
    txs: Iterable[Digest],
    crypto: CryptoProvider,
) -> Event:
    if self_parent is not None and self_parent.vid != vid:
        raise ValueError(f"self-parent {self_parent.label} not created by {vid}")
    for p in other_parents:
        if p.vid == vid:
            raise OtherParentBySelf(f"other-parent {p.label} was created by {vid}")
    parents = ([self_parent] if self_parent is not None else []) + list(other_parents)
    seq = max((p.seq for p in parents), default=-1) + 1
    hashes = [self_parent.self_digest if self_parent is not None else ZERO_DIGEST]
    seen = set(hashes)
    for p in other_parents:
        if p.self_digest not in seen:
            seen.add(p.self_digest)
            hashes.append(p.self_digest)
    unsigned = Event(vid, seq, tuple(hashes), frozenset(txs))
    return Event(
        vid,
        seq,
        unsigned.parent_hashes,
        unsigned.tx_hashes,
        crypto.sign(vid, unsigned.self_digest),
        unsigned.self_digest,
    )


def materialize_placeholders(e: Event, self_parent: Event) -> list[Event]:
    """Derive the empty events filling the sequence gap below ``e``.

    Every validator derives byte-identical placeholders from the same pair,
    so they are never transmitted.
    """
    if e.vid != self_parent.vid:
        raise ValueError("self-parent belongs to a different creator")
    if e.seq <= self_parent.seq + 1:
        raise NotAGap(f"{self_parent.label} -> {e.label} leaves no gap")
    out = []
    prev = self_parent.self_digest
    for seq in range(self_parent.seq + 1, e.seq):
        ph = Event(e.vid, seq, (prev,), frozenset(), placeholder=True)
        out.append(ph)
        prev = ph.self_digest
    return out


def verify_event(e: Event, crypto: CryptoProvider) -> Optional[Violation]:
    """Return ``None`` when ``e`` is well formed, else the first violation."""
    if hash_event(e) != e.self_digest:
        return Violation.BAD_DIGEST
    if not e.parent_hashes:
        return Violation.SELF_PARENT_SLOT_MISUSE
    if ZERO_DIGEST in e.parent_hashes[1:]:
        return Violation.SELF_PARENT_SLOT_MISUSE
    if e.seq == 0 and (e.parent_hashes[0] != ZERO_DIGEST or len(e.parent_hashes) > 1):
        return Violation.SELF_PARENT_SLOT_MISUSE
    if len(set(e.parent_hashes)) != len(e.parent_hashes):
        return Violation.DUPLICATE_PARENT
    if not crypto.verify(e.vid, e.self_digest, e.signature):
        return Violation.BAD_SIGNATURE
    return None
